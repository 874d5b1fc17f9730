//! Estimation drivers and bound assembly.
//!
//! Three Monte Carlo estimators feed the final bound on the distance between
//! the exact and numerical invariant measures:
//!
//! 1. finite-time error: the mean fine-vs-coarse gap of common-noise paths,
//!    chained so the segment starting points sample the numerical invariant
//!    measure;
//! 2. contraction rate `alpha`: per-pair uncoupled fractions over uniform
//!    initial pairs, turned into a worst-case rate through the fitted GPD
//!    endpoint `1 - 1/(V - zeta/xi)`;
//! 3. tail rate `gamma`: the log-linear slope of the coupling-time survival
//!    curve, for the cheap variant of the bound.
//!
//! Certified mode assembles `(E + 2 eps) / (1 - alpha)`; rough mode uses
//! `(E + 2 eps) / (1 - exp(-gamma T))`.
//!
//! Every driver derives one noise stream per unit of work from the master
//! seed and reduces in index order, so results are identical for any worker
//! count.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::coupling::{
    coupling_time_with_engine, CouplingError, CouplingOutcome, CouplingPolicy, PolicyEngine,
};
use crate::evt::{self, EvtError, GpdFit};
use crate::integrate::stream::{derived_stream_id, domains, NoiseStream};
use crate::integrate::{steps_for_horizon, IntegrateError, PairedWalker, Scheme};
use crate::model::{SdeModel, State};
use crate::numeric;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("contraction ratio at least 1 (max r = {max_r:.6}): no contraction observed at this horizon; use a better coupling policy or a larger coupling horizon T")]
    NoContraction { max_r: f64 },
    #[error("fitted GPD shape is nonnegative (xi = {xi:.4}): contraction ratios show no finite upper bound; use a better coupling policy or a larger coupling horizon T")]
    UnboundedTail { xi: f64 },
    #[error("contraction rate must lie in [0, 1), got {alpha}")]
    AlphaOutOfRange { alpha: f64 },
    #[error("tail rate must be positive, got {gamma}")]
    NonPositiveTailRate { gamma: f64 },
    #[error("survival window [{lo}, {hi}] selects fewer than two time points")]
    EmptySurvivalWindow { lo: f64, hi: f64 },
    #[error("trajectory diverged in segment {segment}; partial mean over {completed} segments: {partial_mean:.6e}")]
    Divergence { segment: usize, completed: usize, partial_mean: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Evt(#[from] EvtError),
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),
}

/// The ground metric `d(x, y) = min{cap, ||x - y||^q}`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CappedDistance {
    pub cap: f64,
    pub exponent: f64,
}

impl Default for CappedDistance {
    fn default() -> Self {
        CappedDistance { cap: 1.0, exponent: 1.0 }
    }
}

impl CappedDistance {
    pub fn new(cap: f64, exponent: f64) -> Self {
        assert!(cap > 0.0 && exponent > 0.0, "cap and exponent must be positive");
        CappedDistance { cap, exponent }
    }

    #[inline]
    pub fn eval_norm(&self, norm: f64) -> f64 {
        let powered = if self.exponent == 1.0 { norm } else { norm.powf(self.exponent) };
        powered.min(self.cap)
    }

    pub fn eval(&self, x: &State, y: &State) -> f64 {
        assert_eq!(x.len(), y.len(), "capped distance: dimension mismatch");
        let mut acc = 0.0;
        for i in 0..x.len() {
            let d = x[i] - y[i];
            acc += d * d;
        }
        self.eval_norm(acc.sqrt())
    }
}

/// Axis-aligned box in state space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OmegaBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl OmegaBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, EstimatorError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(EstimatorError::Invalid("box bounds must have equal positive length".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(EstimatorError::Invalid(format!(
                    "box requires lower < upper componentwise, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(OmegaBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Uniform draw from the box.
    pub fn sample(&self, stream: &mut NoiseStream) -> State {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(lo, hi)| lo + (hi - lo) * stream.uniform()),
        )
    }

    /// Box grown by `factor` times its width on every side.
    pub fn inflate(&self, factor: f64) -> OmegaBox {
        let lower = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| lo - factor * (hi - lo))
            .collect();
        let upper = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi + factor * (hi - lo))
            .collect();
        OmegaBox { lower, upper }
    }
}

/// Streaming bounding box plus sample count for deriving `(Omega, eps)`.
#[derive(Debug, Clone)]
pub struct OmegaAccumulator {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    count: usize,
}

impl OmegaAccumulator {
    pub fn new(dim: usize) -> Self {
        OmegaAccumulator { mins: vec![f64::INFINITY; dim], maxs: vec![f64::NEG_INFINITY; dim], count: 0 }
    }

    #[inline]
    pub fn update(&mut self, x: &[f64]) {
        for (i, &v) in x.iter().enumerate() {
            if v < self.mins[i] {
                self.mins[i] = v;
            }
            if v > self.maxs[i] {
                self.maxs[i] = v;
            }
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &OmegaAccumulator) {
        for i in 0..self.mins.len() {
            self.mins[i] = self.mins[i].min(other.mins[i]);
            self.maxs[i] = self.maxs[i].max(other.maxs[i]);
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Bounding box expanded by `margin` of its width per side, and
    /// `eps = 1 / count`.
    pub fn finish(&self, margin: f64) -> Result<(OmegaBox, f64), EstimatorError> {
        if self.count == 0 {
            return Err(EstimatorError::Invalid("no samples accumulated".into()));
        }
        let lower: Vec<f64> = self
            .mins
            .iter()
            .zip(&self.maxs)
            .map(|(lo, hi)| lo - margin * (hi - lo))
            .collect();
        let upper: Vec<f64> = self
            .mins
            .iter()
            .zip(&self.maxs)
            .map(|(lo, hi)| hi + margin * (hi - lo))
            .collect();
        Ok((OmegaBox::new(lower, upper)?, 1.0 / self.count as f64))
    }
}

/// Bounding box of explicit trajectory samples plus `eps = 1/n`.
pub fn derive_omega_and_epsilon(
    samples: &[State],
    margin: f64,
) -> Result<(OmegaBox, f64), EstimatorError> {
    if samples.is_empty() {
        return Err(EstimatorError::Invalid("no samples supplied".into()));
    }
    let mut acc = OmegaAccumulator::new(samples[0].len());
    for s in samples {
        acc.update(s.as_slice());
    }
    acc.finish(margin)
}

/// Statistics of one extrapolation chain.
#[derive(Debug, Clone)]
pub struct ChainStats {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: usize,
    pub omega: OmegaAccumulator,
}

/// Chained fine/coarse extrapolation along a single trajectory: each segment
/// runs paired paths with shared noise from the current point to `T`, records
/// `y = c ||fine - coarse||` (uncapped Euclidean norm; the metric cap is
/// applied at bound-assembly time), and restarts from the fine terminal
/// state, so segment starts sample the numerical invariant measure.
pub fn finite_time_error(
    model: &SdeModel,
    scheme: Scheme,
    x0: &State,
    h: f64,
    t_horizon: f64,
    n_samples: usize,
    stream: &mut NoiseStream,
) -> Result<f64, EstimatorError> {
    let stats = run_error_chain(model, scheme, x0, h, t_horizon, n_samples, 0, stream)?;
    Ok(stats.sum / stats.count as f64)
}

fn run_error_chain(
    model: &SdeModel,
    scheme: Scheme,
    x0: &State,
    h: f64,
    t_horizon: f64,
    n_samples: usize,
    burn_in: usize,
    stream: &mut NoiseStream,
) -> Result<ChainStats, EstimatorError> {
    if n_samples == 0 {
        return Err(EstimatorError::Invalid("need at least one segment".into()));
    }
    let n_blocks = steps_for_horizon(t_horizon, 2.0 * h)?;
    let c = scheme.extrapolation_constant(model);
    let mut walker = PairedWalker::new(model, scheme, x0.as_slice(), h);
    let mut stats = ChainStats {
        sum: 0.0,
        sum_sq: 0.0,
        count: 0,
        omega: OmegaAccumulator::new(model.dim()),
    };
    for seg in 0..(burn_in + n_samples) {
        walker.rebase_coarse_on_fine();
        for _ in 0..n_blocks {
            if let Err(IntegrateError::Divergence { .. }) = walker.advance_block(stream) {
                return Err(EstimatorError::Divergence {
                    segment: seg,
                    completed: stats.count,
                    partial_mean: if stats.count > 0 { stats.sum / stats.count as f64 } else { 0.0 },
                });
            }
            stats.omega.update(walker.fine());
        }
        if seg >= burn_in {
            let mut acc = 0.0;
            for (a, b) in walker.fine().iter().zip(walker.coarse()) {
                acc += (a - b) * (a - b);
            }
            let y = c * acc.sqrt();
            stats.sum += y;
            stats.sum_sq += y * y;
            stats.count += 1;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct FiniteTimeConfig {
    pub h: f64,
    pub t_horizon: f64,
    /// Total recorded segments across all chains.
    pub n_samples: usize,
    /// Independent chains (parallelism is per chain; the count is part of
    /// the estimator definition, not of the execution environment).
    pub n_chains: usize,
    /// Discarded leading segments per chain.
    pub burn_in: usize,
}

#[derive(Debug, Clone)]
pub struct FiniteTimeReport {
    pub mean_error: f64,
    /// Naive standard error (segments treated as independent).
    pub std_error: f64,
    pub n_samples: usize,
    /// Bounding box visited by the fine chains.
    pub omega: OmegaAccumulator,
    /// `1 / n_samples`, the default tail-mass allowance.
    pub epsilon: f64,
    pub per_chain_mean: Vec<f64>,
}

/// Multi-chain driver for [`finite_time_error`]. Chain `w` owns stream id
/// `(FINITE_TIME, w)`; reduction is in chain order, so the result does not
/// depend on the worker count.
pub fn finite_time_report(
    model: &SdeModel,
    scheme: Scheme,
    x0: &State,
    cfg: &FiniteTimeConfig,
    master_seed: u64,
) -> Result<FiniteTimeReport, EstimatorError> {
    if cfg.n_chains == 0 || cfg.n_samples == 0 {
        return Err(EstimatorError::Invalid("n_chains and n_samples must be positive".into()));
    }
    let base = cfg.n_samples / cfg.n_chains;
    let extra = cfg.n_samples % cfg.n_chains;
    let chain_sizes: Vec<usize> =
        (0..cfg.n_chains).map(|w| base + usize::from(w < extra)).collect();
    let results: Vec<Result<ChainStats, EstimatorError>> = chain_sizes
        .par_iter()
        .enumerate()
        .map(|(w, &n_w)| {
            if n_w == 0 {
                return Ok(ChainStats {
                    sum: 0.0,
                    sum_sq: 0.0,
                    count: 0,
                    omega: OmegaAccumulator::new(model.dim()),
                });
            }
            let mut stream =
                NoiseStream::new(master_seed, derived_stream_id(domains::FINITE_TIME, w as u64));
            run_error_chain(model, scheme, x0, cfg.h, cfg.t_horizon, n_w, cfg.burn_in, &mut stream)
        })
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut omega = OmegaAccumulator::new(model.dim());
    let mut per_chain_mean = Vec::with_capacity(cfg.n_chains);
    for r in results {
        let stats = r?;
        if stats.count > 0 {
            per_chain_mean.push(stats.sum / stats.count as f64);
        }
        sum += stats.sum;
        sum_sq += stats.sum_sq;
        count += stats.count;
        omega.merge(&stats.omega);
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
    Ok(FiniteTimeReport {
        mean_error: mean,
        std_error: (var / count as f64).sqrt(),
        n_samples: count,
        omega,
        epsilon: 1.0 / count as f64,
        per_chain_mean,
    })
}

/// Contraction data for one initial pair.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ContractionSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub distance: f64,
    pub replicates: usize,
    pub coupled_count: usize,
    pub diverged_count: usize,
    /// `P[tau_c > T] / d(x, y)`: uncoupled fraction over the distance.
    pub r: f64,
    /// `1 / (1 - r)`, infinite when `r >= 1`.
    pub v: f64,
}

/// Output of the contraction sampler: per-pair ratios plus the coupling
/// times of every replicate (as step indices; `u32::MAX` marks censored).
#[derive(Debug, Clone)]
pub struct ContractionRun {
    pub samples: Vec<ContractionSample>,
    pub tau_steps: Vec<Vec<u32>>,
    pub h: f64,
    pub horizon: f64,
}

const CENSORED: u32 = u32::MAX;

impl ContractionRun {
    /// Flattened outcomes in (pair, replicate) order.
    pub fn outcomes(&self) -> Vec<CouplingOutcome> {
        let mut out = Vec::with_capacity(self.tau_steps.iter().map(Vec::len).sum());
        for (pair, taus) in self.tau_steps.iter().enumerate() {
            let diverged_total = self.samples[pair].diverged_count;
            let mut seen_censored = 0usize;
            for &k in taus {
                if k == CENSORED {
                    // attribute the recorded divergences to the first
                    // censored replicates; the distinction only matters for
                    // reporting
                    let diverged = seen_censored < diverged_total;
                    seen_censored += 1;
                    out.push(CouplingOutcome {
                        coupled: false,
                        tau: None,
                        horizon: self.horizon,
                        diverged,
                    });
                } else {
                    out.push(CouplingOutcome {
                        coupled: true,
                        tau: Some(k as f64 * self.h),
                        horizon: self.horizon,
                        diverged: false,
                    });
                }
            }
        }
        out
    }

    pub fn survival_curve(&self) -> SurvivalCurve {
        let n_steps = (self.horizon / self.h).round() as usize;
        let mut coupled_by_step = vec![0u64; n_steps + 1];
        let mut total = 0u64;
        for taus in &self.tau_steps {
            for &k in taus {
                total += 1;
                if k != CENSORED {
                    coupled_by_step[(k as usize).min(n_steps)] += 1;
                }
            }
        }
        let mut times = Vec::with_capacity(n_steps + 1);
        let mut survival = Vec::with_capacity(n_steps + 1);
        let mut coupled_so_far = 0u64;
        for k in 0..=n_steps {
            coupled_so_far += coupled_by_step[k];
            times.push(k as f64 * self.h);
            survival.push((total - coupled_so_far) as f64 / total as f64);
        }
        SurvivalCurve { times, survival, n_runs: total as usize }
    }
}

/// Uniform pairs from `Omega x Omega`, `m` coupling runs per pair, and the
/// resulting contraction ratios. Pair `i` replicate `j` owns stream id
/// `(COUPLING, i*m + j)`; pair drawing has its own stream, so the ensemble
/// is independent of the worker count.
#[allow(clippy::too_many_arguments)]
pub fn sample_contraction_ratios(
    model: &SdeModel,
    policy: &CouplingPolicy,
    omega: &OmegaBox,
    distance: &CappedDistance,
    h: f64,
    t_horizon: f64,
    n_pairs: usize,
    m_replicates: usize,
    master_seed: u64,
) -> Result<ContractionRun, EstimatorError> {
    if n_pairs == 0 || m_replicates == 0 {
        return Err(EstimatorError::Invalid("n_pairs and m_replicates must be positive".into()));
    }
    if omega.dim() != model.dim() {
        return Err(EstimatorError::Invalid(format!(
            "box dimension {} does not match model dimension {}",
            omega.dim(),
            model.dim()
        )));
    }
    let n_steps = steps_for_horizon(t_horizon, h)?;
    if n_steps >= CENSORED as usize {
        return Err(EstimatorError::Invalid("horizon/step ratio too large".into()));
    }
    let engine = PolicyEngine::new(model, policy, h)?;

    let mut draw = NoiseStream::new(master_seed, derived_stream_id(domains::PAIR_DRAW, 0));
    let mut pairs: Vec<(State, State, f64)> = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        loop {
            let x = omega.sample(&mut draw);
            let y = omega.sample(&mut draw);
            let d = distance.eval(&x, &y);
            if d > 0.0 {
                pairs.push((x, y, d));
                break;
            }
            // zero-distance draws are rejected and redrawn; the uniform law
            // on the product box is unaffected
        }
    }

    let per_pair: Vec<Result<(ContractionSample, Vec<u32>), EstimatorError>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (x, y, d))| {
            let mut taus = Vec::with_capacity(m_replicates);
            let mut coupled = 0usize;
            let mut diverged = 0usize;
            for j in 0..m_replicates {
                let sid =
                    derived_stream_id(domains::COUPLING, (i as u64) * m_replicates as u64 + j as u64);
                let mut stream = NoiseStream::new(master_seed, sid);
                let outcome = coupling_time_with_engine(&engine, x, y, t_horizon, &mut stream)?;
                if outcome.coupled {
                    coupled += 1;
                    let tau = outcome.tau.expect("coupled outcome has tau");
                    taus.push((tau / h).round() as u32);
                } else {
                    if outcome.diverged {
                        diverged += 1;
                    }
                    taus.push(CENSORED);
                }
            }
            let uncoupled = m_replicates - coupled;
            let r = uncoupled as f64 / (d * m_replicates as f64);
            let v = if r < 1.0 { 1.0 / (1.0 - r) } else { f64::INFINITY };
            Ok((
                ContractionSample {
                    x: x.as_slice().to_vec(),
                    y: y.as_slice().to_vec(),
                    distance: *d,
                    replicates: m_replicates,
                    coupled_count: coupled,
                    diverged_count: diverged,
                    r,
                    v,
                },
                taus,
            ))
        })
        .collect();

    let mut samples = Vec::with_capacity(n_pairs);
    let mut tau_steps = Vec::with_capacity(n_pairs);
    for item in per_pair {
        let (sample, taus) = item?;
        samples.push(sample);
        tau_steps.push(taus);
    }
    Ok(ContractionRun { samples, tau_steps, h, horizon: t_horizon })
}

/// Contraction-rate estimate with its GPD evidence.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// GPD fit of the `v = 1/(1-r)` exceedances; absent in the degenerate
    /// all-coupled case.
    pub fit: Option<GpdFit>,
    pub v_max: Option<f64>,
    pub note: Option<String>,
}

/// Worst-case contraction rate over the box from per-pair ratios: threshold
/// the `v_i = 1/(1 - r_i)` at the `(1 - exceedance_fraction)` quantile, fit
/// a GPD, and return `1 - 1/(V - zeta/xi)`.
pub fn contraction_rate(
    samples: &[ContractionSample],
    exceedance_fraction: f64,
) -> Result<AlphaEstimate, EstimatorError> {
    contraction_rate_with(samples, exceedance_fraction, evt::DEFAULT_MIN_EXCEEDANCES)
}

pub fn contraction_rate_with(
    samples: &[ContractionSample],
    exceedance_fraction: f64,
    min_exceedances: usize,
) -> Result<AlphaEstimate, EstimatorError> {
    if samples.is_empty() {
        return Err(EstimatorError::Invalid("no contraction samples".into()));
    }
    let max_r = samples.iter().map(|s| s.r).fold(f64::NEG_INFINITY, f64::max);
    if max_r >= 1.0 {
        return Err(EstimatorError::NoContraction { max_r });
    }
    if max_r == 0.0 {
        return Ok(AlphaEstimate {
            alpha: 0.0,
            fit: None,
            v_max: None,
            note: Some(
                "every replicate coupled before the horizon; no contraction evidence needed"
                    .into(),
            ),
        });
    }
    let v: Vec<f64> = samples.iter().map(|s| s.v).collect();
    let threshold = evt::select_threshold_with(&v, exceedance_fraction, min_exceedances)?;
    let fit = evt::fit_gpd_above(&v, threshold, min_exceedances)?;
    if fit.shape >= 0.0 {
        return Err(EstimatorError::UnboundedTail { xi: fit.shape });
    }
    let v_max = fit.upper_endpoint()?;
    let alpha = 1.0 - 1.0 / v_max;
    if !(0.0..1.0).contains(&alpha) {
        return Err(EstimatorError::AlphaOutOfRange { alpha });
    }
    Ok(AlphaEstimate { alpha, fit: Some(fit), v_max: Some(v_max), note: None })
}

/// Empirical survival of the coupling time on the step grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub n_runs: usize,
}

impl SurvivalCurve {
    pub fn from_outcomes(outcomes: &[CouplingOutcome], h: f64, horizon: f64) -> Self {
        let n_steps = (horizon / h).round() as usize;
        let mut coupled_by_step = vec![0u64; n_steps + 1];
        for o in outcomes {
            if let Some(tau) = o.tau {
                coupled_by_step[((tau / h).round() as usize).min(n_steps)] += 1;
            }
        }
        let total = outcomes.len() as u64;
        let mut times = Vec::with_capacity(n_steps + 1);
        let mut survival = Vec::with_capacity(n_steps + 1);
        let mut coupled_so_far = 0u64;
        for k in 0..=n_steps {
            coupled_so_far += coupled_by_step[k];
            times.push(k as f64 * h);
            survival.push((total - coupled_so_far) as f64 / total as f64);
        }
        SurvivalCurve { times, survival, n_runs: outcomes.len() }
    }
}

/// Least-squares slope of `log S(t)` restricted to survival levels inside
/// `fit_window`; returns the decay rate `gamma = -slope`.
pub fn tail_rate(curve: &SurvivalCurve, fit_window: (f64, f64)) -> Result<f64, EstimatorError> {
    let (lo, hi) = fit_window;
    if !(0.0 < lo && lo < hi && hi <= 1.0) {
        return Err(EstimatorError::Invalid(format!("bad survival window [{lo}, {hi}]")));
    }
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for (&t, &s) in curve.times.iter().zip(&curve.survival) {
        if s >= lo && s <= hi && t > 0.0 {
            ts.push(t);
            logs.push(s.ln());
        }
    }
    if ts.len() < 2 {
        return Err(EstimatorError::EmptySurvivalWindow { lo, hi });
    }
    let (_, slope) = numeric::linear_fit(&ts, &logs)?;
    let gamma = -slope;
    if !(gamma > 0.0) {
        return Err(EstimatorError::NonPositiveTailRate { gamma });
    }
    Ok(gamma)
}

/// Default survival window for the tail fit.
pub const DEFAULT_TAIL_WINDOW: (f64, f64) = (0.01, 0.5);

/// Survival curve plus fitted tail rate from raw outcomes.
pub fn survival_and_tail_rate(
    outcomes: &[CouplingOutcome],
    h: f64,
    horizon: f64,
    fit_window: (f64, f64),
) -> Result<(SurvivalCurve, f64), EstimatorError> {
    if outcomes.is_empty() {
        return Err(EstimatorError::Invalid("no coupling outcomes".into()));
    }
    let curve = SurvivalCurve::from_outcomes(outcomes, h, horizon);
    let gamma = tail_rate(&curve, fit_window)?;
    Ok((curve, gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    Certified,
    Rough,
}

/// Assembled distance bound between the exact and numerical invariant
/// measures.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CertifiedBound {
    pub finite_time_error: f64,
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub t_horizon: Option<f64>,
    pub bound: f64,
    pub mode: BoundMode,
}

/// `(E + 2 eps) / (1 - alpha)`.
pub fn certified_bound(e: f64, epsilon: f64, alpha: f64) -> Result<CertifiedBound, EstimatorError> {
    if !(e >= 0.0 && epsilon >= 0.0) {
        return Err(EstimatorError::Invalid("E and eps must be nonnegative".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(EstimatorError::AlphaOutOfRange { alpha });
    }
    Ok(CertifiedBound {
        finite_time_error: e,
        epsilon,
        alpha: Some(alpha),
        gamma: None,
        t_horizon: None,
        bound: (e + 2.0 * epsilon) / (1.0 - alpha),
        mode: BoundMode::Certified,
    })
}

/// `(E + 2 eps) / (1 - exp(-gamma T))`.
pub fn rough_bound(
    e: f64,
    epsilon: f64,
    gamma: f64,
    t_horizon: f64,
) -> Result<CertifiedBound, EstimatorError> {
    if !(e >= 0.0 && epsilon >= 0.0) {
        return Err(EstimatorError::Invalid("E and eps must be nonnegative".into()));
    }
    if !(gamma > 0.0) {
        return Err(EstimatorError::NonPositiveTailRate { gamma });
    }
    if !(t_horizon > 0.0) {
        return Err(EstimatorError::Invalid("T must be positive".into()));
    }
    Ok(CertifiedBound {
        finite_time_error: e,
        epsilon,
        alpha: None,
        gamma: Some(gamma),
        t_horizon: Some(t_horizon),
        bound: (e + 2.0 * epsilon) / (1.0 - (-gamma * t_horizon).exp()),
        mode: BoundMode::Rough,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use approx::assert_relative_eq;

    #[test]
    fn capped_distance_values() {
        let d = CappedDistance::default();
        assert_relative_eq!(d.eval_norm(0.5), 0.5);
        assert_relative_eq!(d.eval_norm(3.0), 1.0);
        let dq = CappedDistance::new(1.0, 0.45);
        assert_relative_eq!(dq.eval_norm(0.25), 0.25f64.powf(0.45), epsilon = 1e-12);
        assert!((dq.eval_norm(0.25) - 0.53589).abs() < 1e-4);
    }

    #[test]
    fn capped_distance_vector_form() {
        let d = CappedDistance::default();
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let y = DVector::from_vec(vec![0.3, 0.4]);
        assert_relative_eq!(d.eval(&x, &y), 0.5, epsilon = 1e-12);
        assert_relative_eq!(d.eval(&y, &x), 0.5, epsilon = 1e-12);
        assert_eq!(d.eval(&x, &x), 0.0);
    }

    #[test]
    fn omega_box_validation_and_sampling() {
        assert!(OmegaBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(OmegaBox::new(vec![1.0], vec![0.0]).is_err());
        let b = OmegaBox::new(vec![-1.0, 2.0], vec![1.0, 5.0]).unwrap();
        let mut stream = NoiseStream::new(0, 0);
        for _ in 0..100 {
            let x = b.sample(&mut stream);
            assert!(b.contains(x.as_slice()));
        }
    }

    #[test]
    fn derive_omega_two_points() {
        let samples = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.0, 1.0])];
        let (omega, eps) = derive_omega_and_epsilon(&samples, 0.0).unwrap();
        assert_eq!(omega.lower(), &[0.0, 0.0]);
        assert_eq!(omega.upper(), &[1.0, 1.0]);
        assert_relative_eq!(eps, 0.5);
    }

    #[test]
    fn finite_time_error_zero_for_drift_free_models() {
        let m = crate::model::SdeModel::new(
            "flat",
            1,
            1,
            |_x: &[f64], out: &mut [f64]| out[0] = 0.0,
            crate::model::DiffusionSpec::Constant(nalgebra::DMatrix::from_element(1, 1, 1.5)),
            crate::model::Params::new(),
        );
        let mut stream = NoiseStream::new(0, 0);
        let e = finite_time_error(
            &m,
            Scheme::EulerMaruyama,
            &DVector::from_vec(vec![0.3]),
            0.01,
            1.0,
            50,
            &mut stream,
        )
        .unwrap();
        // telescoping identity up to float summation order
        assert!(e < 1e-13, "drift-free error {e}");
    }

    #[test]
    fn finite_time_report_is_chain_deterministic() {
        let m = model::ring(0.5);
        let cfg = FiniteTimeConfig { h: 0.01, t_horizon: 1.0, n_samples: 64, n_chains: 4, burn_in: 1 };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let a = finite_time_report(&m, Scheme::EulerMaruyama, &x0, &cfg, 42).unwrap();
        let b = finite_time_report(&m, Scheme::EulerMaruyama, &x0, &cfg, 42).unwrap();
        assert_eq!(a.mean_error.to_bits(), b.mean_error.to_bits());
        assert_eq!(a.n_samples, 64);
        assert_relative_eq!(a.epsilon, 1.0 / 64.0);
    }

    #[test]
    fn contraction_rate_trivial_cases() {
        let mk = |r: f64| ContractionSample {
            x: vec![0.0],
            y: vec![1.0],
            distance: 1.0,
            replicates: 10,
            coupled_count: 10 - (10.0 * r) as usize,
            diverged_count: 0,
            r,
            v: if r < 1.0 { 1.0 / (1.0 - r) } else { f64::INFINITY },
        };
        // all coupled instantly
        let est = contraction_rate(&vec![mk(0.0); 50], 0.05).unwrap();
        assert_eq!(est.alpha, 0.0);
        assert!(est.note.is_some());
        // a ratio at 1 means failure with the remedy attached
        let mut samples = vec![mk(0.2); 50];
        samples.push(mk(1.0));
        match contraction_rate(&samples, 0.05) {
            Err(EstimatorError::NoContraction { max_r }) => assert_relative_eq!(max_r, 1.0),
            other => panic!("expected NoContraction, got {other:?}"),
        }
    }

    #[test]
    fn contraction_rate_matches_endpoint_formula() {
        // synthetic v-values drawn from a bounded-tail GPD shifted to 1
        let mut stream = NoiseStream::new(7, 7);
        let samples: Vec<ContractionSample> = (0..4000)
            .map(|_| {
                let v = 1.0 + crate::evt::gpd_quantile(-0.25, 0.1, stream.uniform());
                let r = 1.0 - 1.0 / v;
                ContractionSample {
                    x: vec![0.0],
                    y: vec![1.0],
                    distance: 1.0,
                    replicates: 1000,
                    coupled_count: 0,
                    diverged_count: 0,
                    r,
                    v,
                }
            })
            .collect();
        let est = contraction_rate(&samples, 0.05).unwrap();
        let fit = est.fit.unwrap();
        assert!(fit.shape < 0.0);
        let v_max = est.v_max.unwrap();
        // endpoint of the sampled law is 1 + 0.1/0.25 = 1.4
        assert!((v_max - 1.4).abs() < 0.1, "v_max {v_max}");
        assert!((est.alpha - (1.0 - 1.0 / 1.4)).abs() < 0.06, "alpha {}", est.alpha);
    }

    #[test]
    fn survival_curve_and_tail_rate_on_synthetic_exponential() {
        // exponential coupling times censored at the horizon
        let rate = 0.1378;
        let horizon = 40.0;
        let h = 0.01;
        let mut stream = NoiseStream::new(123, 0);
        let outcomes: Vec<CouplingOutcome> = (0..50_000)
            .map(|_| {
                let tau = -stream.uniform().max(1e-300).ln() / rate;
                if tau <= horizon {
                    CouplingOutcome {
                        coupled: true,
                        tau: Some((tau / h).round() * h),
                        horizon,
                        diverged: false,
                    }
                } else {
                    CouplingOutcome { coupled: false, tau: None, horizon, diverged: false }
                }
            })
            .collect();
        let (curve, gamma) =
            survival_and_tail_rate(&outcomes, h, horizon, DEFAULT_TAIL_WINDOW).unwrap();
        assert_eq!(curve.times.len(), 4001);
        assert!((gamma - rate).abs() / rate < 0.05, "gamma {gamma}");
    }

    #[test]
    fn tail_rate_rejects_empty_window() {
        let curve = SurvivalCurve { times: vec![0.0, 1.0], survival: vec![1.0, 1.0], n_runs: 10 };
        assert!(matches!(
            tail_rate(&curve, DEFAULT_TAIL_WINDOW),
            Err(EstimatorError::EmptySurvivalWindow { .. })
        ));
    }

    #[test]
    fn certified_bound_reference_row() {
        let b = certified_bound(0.00141635, 1e-7, 0.3972).unwrap();
        assert!((b.bound - 0.002350).abs() / 0.002350 < 5e-4, "bound {}", b.bound);
        assert!(certified_bound(0.1, 0.0, 1.0).is_err());
        assert!(certified_bound(-0.1, 0.0, 0.5).is_err());
    }

    #[test]
    fn rough_bound_reference_row() {
        let b = rough_bound(0.00141635, 1e-7, 0.1378, 10.0).unwrap();
        assert!((b.bound - 0.00189377).abs() / 0.00189377 < 5e-4, "bound {}", b.bound);
        assert!(rough_bound(0.1, 0.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn bound_invariants_hold() {
        let b = certified_bound(0.2, 0.015, 0.25).unwrap();
        assert_relative_eq!(b.bound, (0.2 + 0.03) / 0.75, epsilon = 1e-15);
        let r = rough_bound(0.2, 0.015, 0.5, 3.0).unwrap();
        assert_relative_eq!(r.bound, (0.2 + 0.03) / (1.0 - (-1.5f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn contraction_sampler_smoke_on_the_ring() {
        let m = model::ring(0.5);
        let policy = CouplingPolicy::new(crate::coupling::PolicyKind::Mixed);
        let omega = OmegaBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let run = sample_contraction_ratios(
            &m,
            &policy,
            &omega,
            &CappedDistance::default(),
            0.01,
            2.0,
            8,
            4,
            99,
        )
        .unwrap();
        assert_eq!(run.samples.len(), 8);
        for s in &run.samples {
            assert_eq!(s.replicates, 4);
            assert!(s.r >= 0.0);
            assert!(s.coupled_count <= 4);
        }
        // reruns are bit-identical
        let rerun = sample_contraction_ratios(
            &m,
            &policy,
            &omega,
            &CappedDistance::default(),
            0.01,
            2.0,
            8,
            4,
            99,
        )
        .unwrap();
        for (a, b) in run.samples.iter().zip(&rerun.samples) {
            assert_eq!(a.r.to_bits(), b.r.to_bits());
        }
        let curve = run.survival_curve();
        assert_eq!(curve.n_runs, 32);
        assert_relative_eq!(curve.survival[0], 1.0);
    }
}
