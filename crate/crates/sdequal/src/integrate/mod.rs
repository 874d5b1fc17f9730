//! Time-stepping schemes and noise management.
//!
//! Besides plain Euler-Maruyama and (diagonal-noise) Milstein stepping, this
//! module provides the fine/coarse pairing used for step-size extrapolation:
//! a step-`h` path and a step-`2h` path driven by the same Brownian motion,
//! where each coarse increment is the sum of two consecutive fine ones.

pub mod stream;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::model::{DiffusionSpec, SdeModel, State};
use stream::NoiseStream;

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("trajectory diverged to a non-finite state at t = {t}")]
    Divergence { t: f64 },
    #[error("milstein scheme requires constant or diagonal diffusion")]
    UnsupportedDiffusion,
    #[error("degenerate noise: sigma must be positive")]
    DegenerateNoise,
    #[error("{0}")]
    BadHorizon(String),
    #[error("model is not of the kinetic position/velocity form")]
    NotLangevin,
}

/// Numerical scheme for one step of the SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    Milstein,
}

impl Scheme {
    /// Strong convergence order of the scheme on the given model.
    /// Euler-Maruyama is order 1/2 in general but order 1 for constant
    /// diffusion, where it coincides with Milstein.
    pub fn strong_order(&self, model: &SdeModel) -> f64 {
        match self {
            Scheme::EulerMaruyama => {
                if model.is_constant_diffusion() {
                    1.0
                } else {
                    0.5
                }
            }
            Scheme::Milstein => 1.0,
        }
    }

    /// Richardson factor `c = 1 / (2^p - 1)` turning the observed
    /// fine-vs-coarse gap into an estimate of the fine-vs-exact gap.
    pub fn extrapolation_constant(&self, model: &SdeModel) -> f64 {
        let p = self.strong_order(model);
        1.0 / (2f64.powf(p) - 1.0)
    }

    /// One step written into `out`; `scratch` must have length `dim`.
    #[inline]
    pub(crate) fn step_into(
        &self,
        model: &SdeModel,
        x: &[f64],
        h: f64,
        dw: &[f64],
        scratch: &mut [f64],
        out: &mut [f64],
    ) -> Result<(), IntegrateError> {
        model.drift_into(x, scratch);
        for i in 0..x.len() {
            out[i] = x[i] + scratch[i] * h;
        }
        model.add_noise_into(x, dw, out);
        if let Scheme::Milstein = self {
            match model.diffusion_spec() {
                // constant sigma: the correction vanishes and Milstein
                // coincides with Euler-Maruyama
                DiffusionSpec::Constant(_) => {}
                DiffusionSpec::Diagonal { sigma, dsigma } => {
                    let n = x.len();
                    sigma(x, scratch);
                    let mut deriv = vec![0.0; n];
                    dsigma(x, &mut deriv);
                    for i in 0..n {
                        out[i] += 0.5 * scratch[i] * deriv[i] * (dw[i] * dw[i] - h);
                    }
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(IntegrateError::Divergence { t: h });
        }
        Ok(())
    }
}

fn check_step_inputs(model: &SdeModel, x: &State, h: f64, dw: &[f64]) -> Result<(), IntegrateError> {
    if x.len() != model.dim() {
        return Err(IntegrateError::DimensionMismatch { expected: model.dim(), got: x.len() });
    }
    if dw.len() != model.noise_dim() {
        return Err(IntegrateError::DimensionMismatch {
            expected: model.noise_dim(),
            got: dw.len(),
        });
    }
    assert!(h > 0.0, "step size must be positive");
    Ok(())
}

/// One Euler-Maruyama step `x + f(x) h + sigma(x) dW`.
///
/// `dw` is the Brownian increment itself (variance `h` per component).
pub fn em_step(model: &SdeModel, x: &State, h: f64, dw: &[f64]) -> Result<State, IntegrateError> {
    check_step_inputs(model, x, h, dw)?;
    let mut out = DVector::zeros(model.dim());
    let mut scratch = vec![0.0; model.dim()];
    Scheme::EulerMaruyama.step_into(model, x.as_slice(), h, dw, &mut scratch, out.as_mut_slice())?;
    Ok(out)
}

/// One Milstein step. For diagonal state-dependent diffusion this adds the
/// per-coordinate correction `sigma_i sigma_i' (dW_i^2 - h) / 2`; for
/// constant diffusion it returns exactly the Euler-Maruyama step.
pub fn milstein_step(
    model: &SdeModel,
    x: &State,
    h: f64,
    dw: &[f64],
) -> Result<State, IntegrateError> {
    check_step_inputs(model, x, h, dw)?;
    if let DiffusionSpec::Diagonal { .. } = model.diffusion_spec() {
        if model.noise_dim() != model.dim() {
            return Err(IntegrateError::UnsupportedDiffusion);
        }
    }
    let mut out = DVector::zeros(model.dim());
    let mut scratch = vec![0.0; model.dim()];
    Scheme::Milstein.step_into(model, x.as_slice(), h, dw, &mut scratch, out.as_mut_slice())?;
    Ok(out)
}

/// A discrete path with uniform step `h`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Simulates `n_steps` steps from `x0`, recording every state.
pub fn simulate(
    model: &SdeModel,
    scheme: Scheme,
    x0: &State,
    h: f64,
    n_steps: usize,
    stream: &mut NoiseStream,
) -> Result<Trajectory, IntegrateError> {
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(x0.clone());
    let mut walker = PathWalker::new(model, scheme, x0.clone(), h);
    for k in 0..n_steps {
        walker.advance(stream)?;
        times.push((k + 1) as f64 * h);
        states.push(walker.state_vec());
    }
    Ok(Trajectory { times, states })
}

/// Step-by-step path driver that owns its scratch buffers. Used by the
/// long-run drivers that must not materialize whole trajectories.
pub struct PathWalker<'m> {
    model: &'m SdeModel,
    scheme: Scheme,
    h: f64,
    t: f64,
    x: Vec<f64>,
    next: Vec<f64>,
    dw: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'m> PathWalker<'m> {
    pub fn new(model: &'m SdeModel, scheme: Scheme, x0: State, h: f64) -> Self {
        let dim = model.dim();
        PathWalker {
            model,
            scheme,
            h,
            t: 0.0,
            x: x0.as_slice().to_vec(),
            next: vec![0.0; dim],
            dw: vec![0.0; model.noise_dim()],
            scratch: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn state_vec(&self) -> State {
        DVector::from_column_slice(&self.x)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    #[inline]
    pub fn advance(&mut self, stream: &mut NoiseStream) -> Result<(), IntegrateError> {
        stream.brownian_increment_into(self.h, &mut self.dw);
        self.scheme
            .step_into(self.model, &self.x, self.h, &self.dw, &mut self.scratch, &mut self.next)
            .map_err(|_| IntegrateError::Divergence { t: self.t + self.h })?;
        std::mem::swap(&mut self.x, &mut self.next);
        self.t += self.h;
        Ok(())
    }
}

/// Terminal states of a step-`h` path and a step-`2h` path driven by the
/// same noise from `x0` up to `t_horizon` (which must be a multiple of
/// `2h`). The coarse path consumes the pairwise sums of the fine Brownian
/// increments, so both paths see the same underlying Brownian motion.
pub fn paired_fine_coarse(
    model: &SdeModel,
    scheme: Scheme,
    x0: &State,
    h: f64,
    t_horizon: f64,
    stream: &mut NoiseStream,
) -> Result<(State, State), IntegrateError> {
    if x0.len() != model.dim() {
        return Err(IntegrateError::DimensionMismatch { expected: model.dim(), got: x0.len() });
    }
    let n_coarse = steps_for_horizon(t_horizon, 2.0 * h)?;
    let mut pair = PairedWalker::new(model, scheme, x0.as_slice(), h);
    for _ in 0..n_coarse {
        pair.advance_block(stream)?;
    }
    Ok((DVector::from_column_slice(pair.fine()), DVector::from_column_slice(pair.coarse())))
}

/// Number of steps of size `unit` needed to reach `t_horizon`, requiring the
/// horizon to be an integer multiple of `unit` up to rounding slop.
pub fn steps_for_horizon(t_horizon: f64, unit: f64) -> Result<usize, IntegrateError> {
    if !(t_horizon > 0.0) || !(unit > 0.0) {
        return Err(IntegrateError::BadHorizon(format!(
            "horizon {t_horizon} and step {unit} must be positive"
        )));
    }
    let ratio = t_horizon / unit;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) || n < 1.0 {
        return Err(IntegrateError::BadHorizon(format!(
            "horizon {t_horizon} is not a positive multiple of {unit}"
        )));
    }
    Ok(n as usize)
}

/// Walker for the common-noise fine/coarse pair; advances in blocks of `2h`.
pub struct PairedWalker<'m> {
    model: &'m SdeModel,
    scheme: Scheme,
    h: f64,
    t: f64,
    fine: Vec<f64>,
    coarse: Vec<f64>,
    buf: Vec<f64>,
    dw1: Vec<f64>,
    dw2: Vec<f64>,
    dw_sum: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'m> PairedWalker<'m> {
    pub fn new(model: &'m SdeModel, scheme: Scheme, x0: &[f64], h: f64) -> Self {
        let dim = model.dim();
        let m = model.noise_dim();
        PairedWalker {
            model,
            scheme,
            h,
            t: 0.0,
            fine: x0.to_vec(),
            coarse: x0.to_vec(),
            buf: vec![0.0; dim],
            dw1: vec![0.0; m],
            dw2: vec![0.0; m],
            dw_sum: vec![0.0; m],
            scratch: vec![0.0; dim],
        }
    }

    pub fn fine(&self) -> &[f64] {
        &self.fine
    }

    pub fn coarse(&self) -> &[f64] {
        &self.coarse
    }

    /// Resets both paths to `x0` without touching the noise stream.
    pub fn reset(&mut self, x0: &[f64]) {
        self.fine.copy_from_slice(x0);
        self.coarse.copy_from_slice(x0);
        self.t = 0.0;
    }

    /// Restarts the coarse path from the current fine state (used when
    /// chaining extrapolation segments along one long trajectory).
    pub fn rebase_coarse_on_fine(&mut self) {
        self.coarse.copy_from_slice(&self.fine);
    }

    /// Two fine steps and one coarse step sharing the same noise.
    #[inline]
    pub fn advance_block(&mut self, stream: &mut NoiseStream) -> Result<(), IntegrateError> {
        stream.brownian_increment_into(self.h, &mut self.dw1);
        stream.brownian_increment_into(self.h, &mut self.dw2);
        for j in 0..self.dw1.len() {
            self.dw_sum[j] = self.dw1[j] + self.dw2[j];
        }
        let step = |scheme: &Scheme,
                    model: &SdeModel,
                    x: &mut Vec<f64>,
                    buf: &mut Vec<f64>,
                    scratch: &mut Vec<f64>,
                    h: f64,
                    dw: &[f64],
                    t_err: f64|
         -> Result<(), IntegrateError> {
            scheme
                .step_into(model, x, h, dw, scratch, buf)
                .map_err(|_| IntegrateError::Divergence { t: t_err })?;
            std::mem::swap(x, buf);
            Ok(())
        };
        step(&self.scheme, self.model, &mut self.fine, &mut self.buf, &mut self.scratch, self.h, &self.dw1, self.t + self.h)?;
        step(&self.scheme, self.model, &mut self.fine, &mut self.buf, &mut self.scratch, self.h, &self.dw2, self.t + 2.0 * self.h)?;
        step(&self.scheme, self.model, &mut self.coarse, &mut self.buf, &mut self.scratch, 2.0 * self.h, &self.dw_sum, self.t + 2.0 * self.h)?;
        self.t += 2.0 * self.h;
        Ok(())
    }
}

/// Mean and covariance of a multivariate Gaussian law.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianParams {
    /// Checks symmetry (to 1e-12) and positive semidefiniteness (eigenvalues
    /// above -1e-12) of the covariance.
    pub fn validate(&self) -> Result<(), IntegrateError> {
        let n = self.covariance.nrows();
        if self.covariance.ncols() != n || self.mean.len() != n {
            return Err(IntegrateError::DimensionMismatch { expected: n, got: self.mean.len() });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.covariance[(i, j)] - self.covariance[(j, i)]).abs() > 1e-12 {
                    return Err(IntegrateError::BadHorizon(
                        "covariance is not symmetric".into(),
                    ));
                }
            }
        }
        let eig = self.covariance.clone().symmetric_eigenvalues();
        if eig.iter().any(|&l| l < -1e-12) {
            return Err(IntegrateError::BadHorizon("covariance is not PSD".into()));
        }
        Ok(())
    }

    /// Density evaluator backed by a Cholesky factorization.
    pub fn density(&self) -> Result<GaussianDensity, IntegrateError> {
        GaussianDensity::new(self)
    }
}

/// Log-density evaluation and sampling for a fixed Gaussian law.
pub struct GaussianDensity {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(params: &GaussianParams) -> Result<Self, IntegrateError> {
        let n = params.mean.len();
        let chol = Cholesky::new(params.covariance.clone())
            .ok_or(IntegrateError::DegenerateNoise)?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianDensity { mean: params.mean.clone(), chol, log_norm })
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let solved = self.chol.solve(&diff);
        self.log_norm - 0.5 * diff.dot(&solved)
    }

    pub fn sample(&self, stream: &mut NoiseStream) -> DVector<f64> {
        let n = self.mean.len();
        let mut z = DVector::zeros(n);
        stream.fill_standard_normal(z.as_mut_slice());
        &self.mean + self.chol.l() * z
    }
}

/// Exact Gaussian law of the kinetic state after two Euler-Maruyama steps of
/// size `h`, conditioned on the current state.
///
/// The mean is obtained by composing two noiseless steps (so it agrees with
/// the simulator by construction, including the `-gamma h^2 V` term in the
/// position update). The noise of the first step enters positions through
/// one leapfrog of the velocity, giving per-coordinate loadings
/// `sigma h^{3/2}` on X and `sigma (1 - gamma h) h^{1/2}` plus a fresh
/// `sigma h^{1/2}` on V.
pub fn langevin_two_step_density(
    model: &SdeModel,
    state: &State,
    h: f64,
) -> Result<GaussianParams, IntegrateError> {
    let lang = model.langevin_structure().ok_or(IntegrateError::NotLangevin)?;
    if state.len() != model.dim() {
        return Err(IntegrateError::DimensionMismatch { expected: model.dim(), got: state.len() });
    }
    if lang.sigma <= 0.0 {
        return Err(IntegrateError::DegenerateNoise);
    }
    assert!(h > 0.0, "step size must be positive");
    let dim = model.dim();
    let dx = lang.dim_x;

    // deterministic part: two drift-only steps
    let mut mean = vec![0.0; dim];
    let mut mid = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    model.drift_into(state.as_slice(), &mut scratch);
    for i in 0..dim {
        mid[i] = state[i] + h * scratch[i];
    }
    model.drift_into(&mid, &mut scratch);
    for i in 0..dim {
        mean[i] = mid[i] + h * scratch[i];
    }

    // covariance: X_i gets sigma h^{3/2} N0_i; V_i gets
    // sigma (1 - gamma h) h^{1/2} N0_i + sigma h^{1/2} N1_i.
    let s = lang.sigma;
    let damp = 1.0 - lang.gamma * h;
    let cxx = s * s * h * h * h;
    let cxv = s * s * damp * h * h;
    let cvv = s * s * h * (1.0 + damp * damp);
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..dx {
        cov[(i, i)] = cxx;
        cov[(i, dx + i)] = cxv;
        cov[(dx + i, i)] = cxv;
        cov[(dx + i, dx + i)] = cvv;
    }
    Ok(GaussianParams { mean: DVector::from_vec(mean), covariance: cov })
}
