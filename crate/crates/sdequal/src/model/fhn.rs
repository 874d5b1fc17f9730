//! Ring of stochastically forced FitzHugh-Nagumo oscillators with
//! nearest-neighbor and mean-field coupling, in rescaled recovery variables:
//!
//! ```text
//! du_i = ( u_i/mu - u_i^3/(3 mu) - v_i/sqrt(mu)
//!          + d_u (u_{i+1} + u_{i-1} - 2 u_i)/mu
//!          + w (u_bar - u_i)/mu ) dt + sigma/sqrt(mu) dW^{u,i}
//! dv_i = ( u_i/sqrt(mu) + a/sqrt(mu) ) dt + sigma/sqrt(mu) dW^{v,i}
//! ```
//!
//! Neurons are connected as a ring (`u_0 = u_N`, `u_{N+1} = u_1`) and
//! `u_bar` is the mean membrane potential. State layout is
//! `(u_1..u_N, v_1..v_N)` with independent noise on all 2N coordinates.

use nalgebra::{DMatrix, DVector};

use super::{get_param, ModelError, Params, RunDefaults, SdeModel};
use crate::estimators::OmegaBox;

pub struct FhnParams {
    pub n: usize,
    pub mu: f64,
    pub d_u: f64,
    pub w: f64,
    pub a: f64,
    pub sigma: f64,
}

pub fn fhn_network(p: FhnParams) -> SdeModel {
    assert!(p.n >= 1, "fhn: need at least one neuron");
    assert!(p.mu > 0.0 && p.sigma > 0.0, "fhn: mu and sigma must be positive");
    let FhnParams { n, mu, d_u, w, a, sigma } = p;
    let dim = 2 * n;
    let sqrt_mu = mu.sqrt();
    let noise = sigma / sqrt_mu;
    let mut params = Params::new();
    params.insert("n".into(), n as f64);
    params.insert("mu".into(), mu);
    params.insert("d_u".into(), d_u);
    params.insert("w".into(), w);
    params.insert("a".into(), a);
    params.insert("sigma".into(), sigma);
    SdeModel::new(
        "fhn",
        dim,
        dim,
        move |x: &[f64], out: &mut [f64]| {
            let (u, v) = x.split_at(n);
            let u_bar = u.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                let up = u[(i + 1) % n];
                let um = u[(i + n - 1) % n];
                out[i] = (u[i] - u[i] * u[i] * u[i] / 3.0 - sqrt_mu * v[i]
                    + d_u * (up + um - 2.0 * u[i])
                    + w * (u_bar - u[i]))
                    / mu;
                out[n + i] = (u[i] + a) / sqrt_mu;
            }
        },
        super::DiffusionSpec::Constant(DMatrix::from_diagonal_element(dim, dim, noise)),
        params,
    )
}

pub(super) fn entry(params: &Params) -> Result<(SdeModel, RunDefaults), ModelError> {
    let n_raw = get_param(params, "n");
    let n = n_raw as usize;
    if n_raw.fract() != 0.0 || n < 1 {
        return Err(ModelError::InvalidParameter("fhn: n must be an integer >= 1".into()));
    }
    let mu = get_param(params, "mu");
    let sigma = get_param(params, "sigma");
    if mu <= 0.0 || sigma <= 0.0 {
        return Err(ModelError::InvalidParameter("fhn: mu and sigma must be positive".into()));
    }
    let p = FhnParams {
        n,
        mu,
        d_u: get_param(params, "d_u"),
        w: get_param(params, "w"),
        a: get_param(params, "a"),
        sigma,
    };
    let dim = 2 * n;
    let defaults = RunDefaults {
        omega: OmegaBox::new(vec![-6.0; dim], vec![6.0; dim]).expect("static box"),
        h: 5e-4,
        t_horizon: 3.0,
        x0: DVector::zeros(dim),
    };
    Ok((fhn_network(p), defaults))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn test_params(n: usize) -> FhnParams {
        FhnParams { n, mu: 0.1, d_u: 0.03, w: 0.3, a: 1.05, sigma: 0.6 }
    }

    #[test]
    fn drift_is_invariant_under_neuron_relabeling() {
        let n = 5;
        let m = fhn_network(test_params(n));
        let x = DVector::from_vec(vec![
            0.1, -0.4, 0.9, 0.2, -1.1, // u
            0.3, 0.0, -0.2, 0.5, 0.7, // v
        ]);
        // relabel i -> i+1 (mod n) in both blocks
        let relabeled = DVector::from_fn(2 * n, |k, _| {
            if k < n {
                x[(k + 1) % n]
            } else {
                x[n + (k - n + 1) % n]
            }
        });
        let f_x = m.drift(&x).unwrap();
        let f_rel = m.drift(&relabeled).unwrap();
        // the mean-field term sums in a different order after relabeling,
        // so equality holds to rounding rather than bit-exactly
        for i in 0..n {
            assert!((f_rel[i] - f_x[(i + 1) % n]).abs() < 1e-12);
            assert!((f_rel[n + i] - f_x[n + (i + 1) % n]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_neuron_ring_doubles_the_neighbor_term() {
        // with N = 2 both neighbors of neuron 1 are neuron 2
        let m = fhn_network(test_params(2));
        let x = DVector::from_vec(vec![0.4, -0.3, 0.1, 0.2]);
        let f = m.drift(&x).unwrap();
        let (mu, d_u, w) = (0.1f64, 0.03, 0.3);
        let u_bar = (0.4 - 0.3) / 2.0;
        let expected = (0.4 - 0.4f64.powi(3) / 3.0 - mu.sqrt() * 0.1
            + d_u * 2.0 * (-0.3 - 0.4)
            + w * (u_bar - 0.4))
            / mu;
        assert!((f[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn noise_strength_is_rescaled_by_mu() {
        let m = fhn_network(test_params(2));
        let s = m.diffusion(&DVector::zeros(4)).unwrap();
        let expected = 0.6 / 0.1f64.sqrt();
        for i in 0..4 {
            assert!((s[(i, i)] - expected).abs() < 1e-15);
        }
    }
}
