//! Scratch sweep: ring-system estimates across candidate step sizes.

use nalgebra::DVector;
use sdequal::coupling::{CouplingPolicy, PolicyKind};
use sdequal::estimators::{
    contraction_rate, finite_time_report, sample_contraction_ratios, tail_rate, CappedDistance,
    FiniteTimeConfig, OmegaBox,
};
use sdequal::integrate::Scheme;
use sdequal::model;

fn main() {
    let m = model::ring(0.5);
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let h = 0.0008;
    let cfg =
        FiniteTimeConfig { h, t_horizon: 10.0, n_samples: 1_000_000, n_chains: 8, burn_in: 10 };
    let t0 = std::time::Instant::now();
    let rep = finite_time_report(&m, Scheme::EulerMaruyama, &x0, &cfg, 20240809).unwrap();
    println!(
        "h = {h}: E = {:.6e}  se = {:.2e}  eps = {:.1e}  box = {:?}  ({:.1?})",
        rep.mean_error,
        rep.std_error,
        rep.epsilon,
        rep.omega.finish(0.05).map(|(b, _)| (b.lower().to_vec(), b.upper().to_vec())),
        t0.elapsed()
    );

    let omega = OmegaBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
    let policy = CouplingPolicy::new(PolicyKind::Mixed);
    let t0 = std::time::Instant::now();
    let run = sample_contraction_ratios(
        &m,
        &policy,
        &omega,
        &CappedDistance::default(),
        h,
        10.0,
        2000,
        200,
        20240809,
    )
    .unwrap();
    let max_r = run.samples.iter().map(|s| s.r).fold(0.0f64, f64::max);
    println!("contraction run: {:.1?}, max r = {max_r:.4}", t0.elapsed());
    match contraction_rate(&run.samples, 0.05) {
        Ok(est) => println!(
            "alpha = {:.4}  v_max = {:?}  fit = {:?}",
            est.alpha,
            est.v_max,
            est.fit.map(|f| (f.threshold, f.scale, f.shape))
        ),
        Err(e) => println!("alpha failed: {e}"),
    }
    let curve = run.survival_curve();
    match tail_rate(&curve, (0.01, 0.5)) {
        Ok(g) => println!("gamma = {g:.4}"),
        Err(e) => println!("gamma failed: {e}"),
    }
}
