//! Generalized Pareto machinery for peaks-over-threshold estimation.
//!
//! Exceedances `y = v - V` over a high threshold `V` are fitted with the GPD
//! `F(y) = 1 - (1 + xi y / zeta)^(-1/xi)` (exponential branch at `xi = 0`).
//! A negative fitted shape implies a finite right endpoint `V - zeta / xi`,
//! which is the quantity the contraction-rate estimator needs.
//!
//! Fitting is maximum likelihood through the one-parameter profile in
//! `tau = xi / zeta`: for fixed `tau` the inner maximum is explicit,
//! `xi(tau) = mean(log(1 + tau y))`, leaving a bounded scalar search.
//! Probability-weighted moments provide the starting bracket.

use thiserror::Error;

/// Exceedance count below which a fit is refused.
pub const DEFAULT_MIN_EXCEEDANCES: usize = 30;

#[derive(Debug, Error)]
pub enum EvtError {
    #[error("too few exceedances: got {got}, need at least {need}")]
    TooFewExceedances { got: usize, need: usize },
    #[error("degenerate sample: exceedances carry no spread")]
    DegenerateSample,
    #[error("exceedances must be positive, got {0}")]
    NonPositiveExceedance(f64),
    #[error("x = {x} is outside the support (right endpoint {endpoint})")]
    OutOfSupport { x: f64, endpoint: f64 },
    #[error("profile-likelihood search failed to bracket a maximum")]
    OptimizerFailure,
    #[error("fitted shape {xi} is nonnegative: no finite upper endpoint; use a better coupling policy or a larger coupling horizon T")]
    NonNegativeShape { xi: f64 },
}

/// A fitted generalized Pareto tail.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GpdFit {
    /// Threshold the exceedances were measured from.
    pub threshold: f64,
    /// Scale parameter (zeta).
    pub scale: f64,
    /// Shape parameter (xi).
    pub shape: f64,
    pub n_exceedances: usize,
    pub log_likelihood: f64,
}

impl GpdFit {
    /// Right endpoint `V - zeta / xi`; defined only for negative shape.
    pub fn upper_endpoint(&self) -> Result<f64, EvtError> {
        gpd_upper_endpoint(self)
    }

    /// Fitted CDF of the exceedance distribution (above the threshold).
    pub fn cdf(&self, exceedance: f64) -> Result<f64, EvtError> {
        gpd_cdf(self.shape, self.scale, exceedance)
    }
}

/// GPD cumulative distribution function `F_{xi,beta}(x)` for `x >= 0`.
pub fn gpd_cdf(xi: f64, beta: f64, x: f64) -> Result<f64, EvtError> {
    assert!(beta > 0.0, "gpd_cdf: scale must be positive");
    if x < 0.0 {
        return Err(EvtError::OutOfSupport { x, endpoint: 0.0 });
    }
    if xi.abs() < 1e-12 {
        return Ok(1.0 - (-x / beta).exp());
    }
    let t = 1.0 + xi * x / beta;
    if t < 0.0 {
        // only reachable for xi < 0 past the right endpoint
        return Err(EvtError::OutOfSupport { x, endpoint: -beta / xi });
    }
    Ok(1.0 - t.powf(-1.0 / xi))
}

/// Quantile function of the GPD; inverse of [`gpd_cdf`].
pub fn gpd_quantile(xi: f64, beta: f64, p: f64) -> f64 {
    assert!(beta > 0.0 && (0.0..1.0).contains(&p));
    if xi.abs() < 1e-12 {
        -beta * (1.0 - p).ln()
    } else {
        beta / xi * ((1.0 - p).powf(-xi) - 1.0)
    }
}

/// The `(1 - exceedance_fraction)` lower empirical quantile, used as the
/// peaks-over-threshold cut. Ties break toward the smaller value so the fit
/// keeps more exceedances.
pub fn select_threshold(samples: &[f64], exceedance_fraction: f64) -> Result<f64, EvtError> {
    select_threshold_with(samples, exceedance_fraction, DEFAULT_MIN_EXCEEDANCES)
}

pub fn select_threshold_with(
    samples: &[f64],
    exceedance_fraction: f64,
    min_exceedances: usize,
) -> Result<f64, EvtError> {
    assert!(
        exceedance_fraction > 0.0 && exceedance_fraction < 1.0,
        "exceedance fraction must be in (0, 1)"
    );
    let n = samples.len();
    if n == 0 {
        return Err(EvtError::TooFewExceedances { got: 0, need: min_exceedances });
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    // lower empirical quantile: order statistic at ceil((1 - f) n), 1-based
    let rank = ((1.0 - exceedance_fraction) * n as f64).ceil().max(1.0) as usize;
    let threshold = sorted[rank.min(n) - 1];
    let n_exc = sorted.iter().filter(|&&v| v > threshold).count();
    if n_exc < min_exceedances {
        return Err(EvtError::TooFewExceedances { got: n_exc, need: min_exceedances });
    }
    Ok(threshold)
}

/// Maximum-likelihood GPD fit to positive exceedances `y_i = v_i - V`.
/// The reported `threshold` is zero; callers that produced the exceedances
/// from a threshold should overwrite it via [`fit_gpd_above`].
pub fn fit_gpd(exceedances: &[f64]) -> Result<GpdFit, EvtError> {
    fit_gpd_with(exceedances, DEFAULT_MIN_EXCEEDANCES)
}

/// Convenience: select exceedances of `samples` above `threshold` and fit.
pub fn fit_gpd_above(
    samples: &[f64],
    threshold: f64,
    min_exceedances: usize,
) -> Result<GpdFit, EvtError> {
    let exceedances: Vec<f64> =
        samples.iter().filter(|&&v| v > threshold).map(|&v| v - threshold).collect();
    let mut fit = fit_gpd_with(&exceedances, min_exceedances)?;
    fit.threshold = threshold;
    Ok(fit)
}

pub fn fit_gpd_with(exceedances: &[f64], min_exceedances: usize) -> Result<GpdFit, EvtError> {
    let n = exceedances.len();
    if n < min_exceedances.max(2) {
        return Err(EvtError::TooFewExceedances { got: n, need: min_exceedances });
    }
    if let Some(&bad) = exceedances.iter().find(|&&y| !(y > 0.0) || !y.is_finite()) {
        return Err(EvtError::NonPositiveExceedance(bad));
    }
    let y_max = exceedances.iter().cloned().fold(f64::MIN, f64::max);
    let y_min = exceedances.iter().cloned().fold(f64::MAX, f64::min);
    if y_max - y_min < 1e-15 * y_max.abs() {
        return Err(EvtError::DegenerateSample);
    }
    let mean = exceedances.iter().sum::<f64>() / n as f64;

    // Profile log-likelihood in tau = xi / zeta. Valid range keeps
    // 1 + tau y > 0 for every observation.
    let profile = |tau: f64| -> f64 {
        if tau == 0.0 {
            // exponential limit
            return -(n as f64) * (mean.ln() + 1.0);
        }
        let mut acc = 0.0;
        for &y in exceedances {
            let t = 1.0 + tau * y;
            if t <= 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += t.ln();
        }
        let xi = acc / n as f64;
        // inner maximum requires a positive scale zeta = xi / tau
        if xi / tau <= 0.0 {
            return f64::NEG_INFINITY;
        }
        // guard against the unbounded branch at xi <= -1
        if xi <= -1.0 + 1e-9 {
            return f64::NEG_INFINITY;
        }
        -(n as f64) * ((xi / tau).ln() + xi + 1.0)
    };

    // Bracket the maximizer on a grid spanning bounded tails
    // (tau < 0, xi in (-1, 0)) through heavy tails (tau up to ~100 / mean),
    // seeded by the probability-weighted-moments estimate.
    let tau_lo = -0.9999 / y_max;
    let mut grid: Vec<f64> = Vec::with_capacity(272);
    for k in 0..128 {
        grid.push(tau_lo * (1.0 - k as f64 / 127.0).powi(2));
    }
    grid.push(0.0);
    for k in 0..128 {
        let frac = k as f64 / 127.0;
        grid.push(100.0 / mean * (frac * frac * frac).max(1e-9));
    }
    if let Some((xi0, zeta0)) = pwm_estimate(exceedances) {
        if zeta0 > 0.0 {
            let tau0 = xi0 / zeta0;
            if tau0 > tau_lo {
                for mult in [0.5, 0.9, 1.0, 1.1, 2.0] {
                    grid.push(tau0 * mult);
                }
            }
        }
    }
    grid.retain(|t| *t > tau_lo);
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();

    let mut best_idx = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &tau) in grid.iter().enumerate() {
        let v = profile(tau);
        if v > best_val {
            best_val = v;
            best_idx = i;
        }
    }
    if !best_val.is_finite() {
        return Err(EvtError::OptimizerFailure);
    }
    // Golden-section refinement between the bracketing neighbors.
    let lo = if best_idx == 0 { grid[0] } else { grid[best_idx - 1] };
    let hi = if best_idx + 1 == grid.len() { grid[best_idx] } else { grid[best_idx + 1] };
    let tau_star = golden_section_max(&profile, lo, hi, 200);
    let ll = profile(tau_star);
    if !ll.is_finite() {
        return Err(EvtError::OptimizerFailure);
    }

    let (xi, zeta) = if tau_star == 0.0 {
        (0.0, mean)
    } else {
        let xi = exceedances.iter().map(|&y| (1.0 + tau_star * y).ln()).sum::<f64>() / n as f64;
        (xi, xi / tau_star)
    };
    Ok(GpdFit { threshold: 0.0, scale: zeta, shape: xi, n_exceedances: n, log_likelihood: ll })
}

/// Right endpoint `V - zeta / xi` of a bounded-tail fit.
pub fn gpd_upper_endpoint(fit: &GpdFit) -> Result<f64, EvtError> {
    if fit.shape >= 0.0 {
        return Err(EvtError::NonNegativeShape { xi: fit.shape });
    }
    Ok(fit.threshold - fit.scale / fit.shape)
}

/// Probability-weighted-moments estimate `(xi, zeta)`; used to seed the
/// likelihood search.
fn pwm_estimate(exceedances: &[f64]) -> Option<(f64, f64)> {
    let n = exceedances.len();
    if n < 2 {
        return None;
    }
    let mut sorted = exceedances.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let a0 = sorted.iter().sum::<f64>() / nf;
    // unbiased estimate of E[Y (1 - F(Y))]
    let a1 = sorted
        .iter()
        .enumerate()
        .map(|(i, &y)| (nf - 1.0 - i as f64) / (nf - 1.0) * y)
        .sum::<f64>()
        / nf;
    let denom = a0 - 2.0 * a1;
    if denom.abs() < 1e-300 {
        return None;
    }
    let k = a0 / denom - 2.0;
    let alpha = 2.0 * a0 * a1 / denom;
    Some((-k, alpha))
}

fn golden_section_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if (b - a).abs() < 1e-14 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // never return something worse than the bracket ends
    let candidates = [mid, a, b];
    candidates
        .into_iter()
        .max_by(|p, q| f(*p).total_cmp(&f(*q)))
        .unwrap()
}

/// Diagnostic row comparing the empirical and fitted exceedance CDFs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GpdDiagnosticRow {
    pub exceedance: f64,
    pub empirical_cdf: f64,
    pub fitted_cdf: f64,
}

/// Per-exceedance comparison of empirical and fitted CDFs, sorted ascending.
pub fn gpd_diagnostic(fit: &GpdFit, exceedances: &[f64]) -> Vec<GpdDiagnosticRow> {
    let mut sorted = exceedances.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &y)| GpdDiagnosticRow {
            exceedance: y,
            empirical_cdf: (i as f64 + 1.0) / n,
            fitted_cdf: fit.cdf(y).unwrap_or(1.0),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cdf_exponential_branch() {
        let v = gpd_cdf(0.0, 2.0, 2.0).unwrap();
        assert_relative_eq!(v, 1.0 - (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn cdf_hits_one_at_the_right_endpoint() {
        // xi = -0.5, beta = 1: endpoint at 2
        let v = gpd_cdf(-0.5, 1.0, 2.0).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        assert!(gpd_cdf(-0.5, 1.0, 2.5).is_err());
    }

    #[test]
    fn cdf_heavy_tail_value() {
        let v = gpd_cdf(1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cdf_limits_match_across_the_xi_zero_seam() {
        for &xi in &[1e-6, -1e-6] {
            for &x in &[0.1, 1.0, 3.0] {
                let a = gpd_cdf(xi, 1.5, x).unwrap();
                let b = gpd_cdf(0.0, 1.5, x).unwrap();
                assert!((a - b).abs() < 1e-6, "xi={xi} x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &(xi, beta) in &[(-0.3, 0.7), (0.0, 1.0), (0.4, 2.0)] {
            for &p in &[0.05, 0.5, 0.95] {
                let x = gpd_quantile(xi, beta, p);
                let back = gpd_cdf(xi, beta, x).unwrap();
                assert_relative_eq!(back, p, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn threshold_of_ranked_integers() {
        let samples: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let t = select_threshold_with(&samples, 0.05, 1).unwrap();
        assert_eq!(t, 95.0);
    }

    #[test]
    fn threshold_rejects_constant_samples() {
        let samples = vec![3.0; 200];
        assert!(matches!(
            select_threshold_with(&samples, 0.05, 1),
            Err(EvtError::TooFewExceedances { got: 0, .. })
        ));
    }

    #[test]
    fn fit_rejects_equal_exceedances() {
        let y = vec![0.5; 100];
        assert!(matches!(fit_gpd(&y), Err(EvtError::DegenerateSample)));
    }

    #[test]
    fn fit_rejects_small_samples() {
        let y = vec![0.1, 0.2, 0.3];
        assert!(matches!(fit_gpd(&y), Err(EvtError::TooFewExceedances { .. })));
    }

    #[test]
    fn endpoint_for_reference_parameters() {
        let fit = GpdFit {
            threshold: 1.48,
            scale: 0.0326,
            shape: -0.1822,
            n_exceedances: 1000,
            log_likelihood: 0.0,
        };
        let endpoint = fit.upper_endpoint().unwrap();
        assert_relative_eq!(endpoint, 1.48 + 0.0326 / 0.1822, epsilon = 1e-12);
        let alpha = 1.0 - 1.0 / endpoint;
        assert!((alpha - 0.3972).abs() < 1e-4);
    }

    #[test]
    fn endpoint_simple_case() {
        let fit = GpdFit {
            threshold: 1.0,
            scale: 0.5,
            shape: -0.5,
            n_exceedances: 100,
            log_likelihood: 0.0,
        };
        assert_relative_eq!(fit.upper_endpoint().unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nonnegative_shape_has_no_endpoint() {
        let fit = GpdFit {
            threshold: 1.0,
            scale: 0.5,
            shape: 0.1,
            n_exceedances: 100,
            log_likelihood: 0.0,
        };
        assert!(matches!(fit.upper_endpoint(), Err(EvtError::NonNegativeShape { .. })));
    }

    #[test]
    fn mle_recovers_bounded_tail_parameters() {
        // inverse-CDF sampling oracle, fixed seed
        let (xi, zeta) = (-0.1822, 0.0326);
        let mut stream = crate::integrate::stream::NoiseStream::new(1234, 0);
        let y: Vec<f64> = (0..5000).map(|_| gpd_quantile(xi, zeta, stream.uniform())).collect();
        let fit = fit_gpd(&y).unwrap();
        assert!((fit.shape - xi).abs() < 0.05, "shape {}", fit.shape);
        assert!((fit.scale - zeta).abs() / zeta < 0.15, "scale {}", fit.scale);
    }

    #[test]
    fn mle_recovers_exponential_tail() {
        let mut stream = crate::integrate::stream::NoiseStream::new(77, 0);
        let y: Vec<f64> = (0..8000).map(|_| gpd_quantile(0.0, 2.0, stream.uniform())).collect();
        let fit = fit_gpd(&y).unwrap();
        assert!(fit.shape.abs() < 0.05, "shape {}", fit.shape);
        assert!((fit.scale - 2.0).abs() / 2.0 < 0.1, "scale {}", fit.scale);
    }

    #[test]
    fn fitted_support_covers_the_data() {
        // whenever xi < 0 the implied endpoint lies beyond the largest
        // observation, otherwise the likelihood would be zero
        let mut stream = crate::integrate::stream::NoiseStream::new(9, 0);
        for seed in 0..5u64 {
            let _ = seed;
            let y: Vec<f64> =
                (0..2000).map(|_| gpd_quantile(-0.25, 1.0, stream.uniform())).collect();
            let fit = fit_gpd(&y).unwrap();
            if fit.shape < 0.0 {
                let endpoint = -fit.scale / fit.shape;
                let y_max = y.iter().cloned().fold(f64::MIN, f64::max);
                assert!(endpoint >= y_max, "endpoint {endpoint} < max {y_max}");
            }
        }
    }

    #[test]
    fn estimates_tighten_with_sample_size() {
        let (xi, zeta) = (-0.2, 1.0);
        let err_at = |n: usize, seed: u64| {
            let mut stream = crate::integrate::stream::NoiseStream::new(seed, 1);
            let y: Vec<f64> = (0..n).map(|_| gpd_quantile(xi, zeta, stream.uniform())).collect();
            let fit = fit_gpd(&y).unwrap();
            (fit.shape - xi).abs()
        };
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.total_cmp(b));
            v[v.len() / 2]
        };
        let small = median((0..20).map(|s| err_at(1000, s)).collect());
        let large = median((0..20).map(|s| err_at(100_000, s)).collect());
        assert!(large < small, "large-n error {large} not below small-n error {small}");
    }
}
