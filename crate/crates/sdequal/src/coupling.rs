//! Markov coupling policies for pairs of numerical trajectories and the
//! coupling-time simulator.
//!
//! A coupled pair advances under one of several noise-sharing rules:
//!
//! * reflection: the second trajectory sees the increment mirrored across
//!   the hyperplane separating the two states;
//! * synchronous: both trajectories see the identical increment;
//! * maximal: both propose independently, then an accept/reject step glues
//!   them together with the largest probability allowed by the overlap of
//!   their one-step transition densities;
//! * mixed: reflection far apart, maximal once within `2 sqrt(h) ||sigma||`;
//! * langevin-mixed: the degenerate-noise variant that reflects velocity
//!   noise across the contraction direction `Q = dX + dV / gamma`,
//!   synchronizes near the `Q = 0` hyperplane, and attempts a two-step
//!   maximal coupling once positions and velocities are close.
//!
//! Exact meeting is only ever declared by the maximal step's set-equal
//! action; proximity alone never counts as coupled.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::integrate::stream::NoiseStream;
use crate::integrate::{langevin_two_step_density, IntegrateError, Scheme};
use crate::model::{SdeModel, State};

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("states coincide: the reflection direction is undefined")]
    CoincidentStates,
    #[error("coupling policy not applicable: {0}")]
    PolicyUnsupported(String),
    #[error("coupled pair diverged at t = {t}")]
    Divergence { t: f64 },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// Pair of trajectories sharing a noise rule. `coupled == true` implies
/// `x1 == x2` exactly, and the pair stays glued forever after.
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub x1: State,
    pub x2: State,
    pub coupled: bool,
    pub t: f64,
}

impl CoupledState {
    pub fn new(x1: State, x2: State) -> Self {
        let coupled = x1 == x2;
        CoupledState { x1, x2, coupled, t: 0.0 }
    }
}

/// Result of running a coupled pair to its meeting time or the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingOutcome {
    pub coupled: bool,
    /// Meeting time (a multiple of the step size) when coupled.
    pub tau: Option<f64>,
    pub horizon: f64,
    /// The pair left the space of finite states; counted as censored.
    pub diverged: bool,
}

impl CouplingOutcome {
    fn censored(horizon: f64, diverged: bool) -> Self {
        CouplingOutcome { coupled: false, tau: None, horizon, diverged }
    }

    fn coupled_at(tau: f64, horizon: f64) -> Self {
        CouplingOutcome { coupled: true, tau: Some(tau), horizon, diverged: false }
    }

    /// Survival indicator P[tau_c > t] for this single run.
    pub fn survives_past(&self, t: f64) -> bool {
        match self.tau {
            Some(tau) => tau > t,
            None => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Reflection,
    Synchronous,
    Maximal,
    Mixed,
    LangevinMixed,
}

/// Coupling policy selection plus thresholds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CouplingPolicy {
    pub kind: PolicyKind,
    /// Distance below which the mixed policy switches from reflection to
    /// maximal coupling. Default: `2 sqrt(h) ||sigma||`.
    #[serde(default)]
    pub switch_threshold: Option<f64>,
    /// `||Q||` threshold separating reflection from synchronous coupling in
    /// the langevin-mixed policy. Default: `2.53 sqrt(h)`.
    #[serde(default)]
    pub q_switch: Option<f64>,
    /// Componentwise proximity window (in units of the one-step noise
    /// scales) inside which the langevin-mixed policy attempts the two-step
    /// maximal coupling.
    #[serde(default = "default_window_multiplier")]
    pub window_multiplier: f64,
}

fn default_window_multiplier() -> f64 {
    2.5
}

impl CouplingPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        CouplingPolicy {
            kind,
            switch_threshold: None,
            q_switch: None,
            window_multiplier: default_window_multiplier(),
        }
    }

    pub fn validate(&self) -> Result<(), CouplingError> {
        if let Some(v) = self.switch_threshold {
            if !(v >= 0.0) {
                return Err(CouplingError::PolicyUnsupported(
                    "switch_threshold must be nonnegative".into(),
                ));
            }
        }
        if let Some(v) = self.q_switch {
            if !(v >= 0.0) {
                return Err(CouplingError::PolicyUnsupported("q_switch must be nonnegative".into()));
            }
        }
        if !(self.window_multiplier >= 0.0) {
            return Err(CouplingError::PolicyUnsupported(
                "window_multiplier must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Reusable buffers for a coupling run; keeps the stepping loop free of
/// allocation.
pub struct PairScratch {
    dw: Vec<f64>,
    dw2: Vec<f64>,
    e: Vec<f64>,
    drift: Vec<f64>,
    out1: Vec<f64>,
    out2: Vec<f64>,
    mu1: Vec<f64>,
    mu2: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
}

impl PairScratch {
    pub fn new(model: &SdeModel) -> Self {
        let n = model.dim();
        let m = model.noise_dim();
        PairScratch {
            dw: vec![0.0; m],
            dw2: vec![0.0; m],
            e: vec![0.0; n.max(m)],
            drift: vec![0.0; n],
            out1: vec![0.0; n],
            out2: vec![0.0; n],
            mu1: vec![0.0; n],
            mu2: vec![0.0; n],
            z1: vec![0.0; n],
            z2: vec![0.0; n],
        }
    }
}

/// How the one-step kernel's quadratic forms are evaluated.
enum KernelShape {
    /// `sigma = s I`: forms reduce to scaled squared norms.
    Isotropic { s: f64 },
    /// General invertible constant `sigma`.
    General { chol: Cholesky<f64, Dyn>, sigma: DMatrix<f64> },
}

/// Per-(model, policy, h) precomputation shared across coupling runs.
pub struct PolicyEngine<'m> {
    model: &'m SdeModel,
    kind: PolicyKind,
    h: f64,
    sigma_inv: Option<DMatrix<f64>>,
    kernel: Option<KernelShape>,
    switch_threshold: f64,
    lang: Option<LangevinEngine>,
}

struct LangevinEngine {
    dim_x: usize,
    gamma: f64,
    q_switch: f64,
    /// componentwise windows: positions within `wx`, velocities within `wv`
    wx: f64,
    wv: f64,
    /// 2x2 Cholesky factor of the per-coordinate (X_i, V_i) block of the
    /// two-step covariance: lower triangle (l11, l21, l22).
    l11: f64,
    l21: f64,
    l22: f64,
    /// inverse of the same block: (a, b; b, c)
    inv_a: f64,
    inv_b: f64,
    inv_c: f64,
}

impl<'m> PolicyEngine<'m> {
    pub fn new(
        model: &'m SdeModel,
        policy: &CouplingPolicy,
        h: f64,
    ) -> Result<Self, CouplingError> {
        assert!(h > 0.0, "step size must be positive");
        policy.validate()?;
        let needs_constant = matches!(
            policy.kind,
            PolicyKind::Reflection | PolicyKind::Maximal | PolicyKind::Mixed
        );
        let mut sigma_inv = None;
        let mut kernel = None;
        let mut switch_threshold = 0.0;
        if needs_constant {
            let s = model.constant_sigma().ok_or_else(|| {
                CouplingError::PolicyUnsupported(format!(
                    "policy {:?} requires a constant diffusion coefficient",
                    policy.kind
                ))
            })?;
            if s.nrows() != s.ncols() {
                return Err(CouplingError::PolicyUnsupported(
                    "policy requires a square diffusion coefficient".into(),
                ));
            }
            let inv = s.clone().try_inverse().ok_or_else(|| {
                CouplingError::PolicyUnsupported("diffusion coefficient is singular".into())
            })?;
            kernel = Some(if let Some(iso) = isotropic_scale(s) {
                KernelShape::Isotropic { s: iso }
            } else {
                let gram = s * s.transpose();
                KernelShape::General {
                    chol: Cholesky::new(gram).ok_or_else(|| {
                        CouplingError::PolicyUnsupported(
                            "sigma sigma^T is not positive definite".into(),
                        )
                    })?,
                    sigma: s.clone(),
                }
            });
            let norm = model.sigma_operator_norm().expect("constant sigma");
            switch_threshold = policy.switch_threshold.unwrap_or(2.0 * h.sqrt() * norm);
            sigma_inv = Some(inv);
        }
        let lang = if policy.kind == PolicyKind::LangevinMixed {
            let s = model.langevin_structure().ok_or_else(|| {
                CouplingError::PolicyUnsupported(
                    "langevin-mixed policy requires a kinetic position/velocity model".into(),
                )
            })?;
            let probe = DVector::zeros(model.dim());
            let two_step = langevin_two_step_density(model, &probe, h)?;
            // per-coordinate (X_i, V_i) covariance block
            let dx = s.dim_x;
            let (cxx, cxv, cvv) = (
                two_step.covariance[(0, 0)],
                two_step.covariance[(0, dx)],
                two_step.covariance[(dx, dx)],
            );
            let det = cxx * cvv - cxv * cxv;
            if !(det > 0.0) || !(cxx > 0.0) {
                return Err(CouplingError::PolicyUnsupported(
                    "two-step covariance is degenerate".into(),
                ));
            }
            let l11 = cxx.sqrt();
            let l21 = cxv / l11;
            let l22 = (cvv - l21 * l21).max(0.0).sqrt();
            if !(l22 > 0.0) {
                return Err(CouplingError::PolicyUnsupported(
                    "two-step covariance is degenerate".into(),
                ));
            }
            let wm = policy.window_multiplier;
            Some(LangevinEngine {
                dim_x: dx,
                gamma: s.gamma,
                q_switch: policy.q_switch.unwrap_or(2.53 * h.sqrt()),
                wx: wm * s.sigma * h.powf(1.5),
                wv: wm * s.sigma * h.sqrt(),
                l11,
                l21,
                l22,
                inv_a: cvv / det,
                inv_b: -cxv / det,
                inv_c: cxx / det,
            })
        } else {
            None
        };
        Ok(PolicyEngine {
            model,
            kind: policy.kind,
            h,
            sigma_inv,
            kernel,
            switch_threshold,
            lang,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn switch_threshold(&self) -> f64 {
        self.switch_threshold
    }

    /// Advances the pair by one policy move (`h`, or `2h` for the two-step
    /// maximal attempt). `max_dt` caps the move so a run never oversteps its
    /// censoring horizon.
    pub fn step(
        &self,
        s: &mut CoupledState,
        stream: &mut NoiseStream,
        max_dt: f64,
        sc: &mut PairScratch,
    ) -> Result<(), CouplingError> {
        assert!(max_dt >= self.h * (1.0 - 1e-9), "no room left for a step");
        if s.coupled {
            return self.coupled_step(s, stream, sc);
        }
        match self.kind {
            PolicyKind::Synchronous => self.synchronous_step(s, stream, sc),
            PolicyKind::Reflection => {
                stream.brownian_increment_into(self.h, &mut sc.dw);
                self.reflection_step(s, sc)
            }
            PolicyKind::Maximal => self.maximal_step(s, stream, sc),
            PolicyKind::Mixed => {
                let mut dist2 = 0.0;
                for i in 0..s.x1.len() {
                    let d = s.x1[i] - s.x2[i];
                    dist2 += d * d;
                }
                if dist2.sqrt() >= self.switch_threshold {
                    stream.brownian_increment_into(self.h, &mut sc.dw);
                    self.reflection_step(s, sc)
                } else {
                    self.maximal_step(s, stream, sc)
                }
            }
            PolicyKind::LangevinMixed => self.langevin_step(s, stream, max_dt, sc),
        }
    }

    #[inline]
    fn em_into(
        &self,
        x: &[f64],
        h: f64,
        dw: &[f64],
        drift: &mut [f64],
        out: &mut [f64],
        t_err: f64,
    ) -> Result<(), CouplingError> {
        Scheme::EulerMaruyama
            .step_into(self.model, x, h, dw, drift, out)
            .map_err(|_| CouplingError::Divergence { t: t_err })
    }

    /// Shared-noise step preserving exact equality of a coupled pair.
    fn coupled_step(
        &self,
        s: &mut CoupledState,
        stream: &mut NoiseStream,
        sc: &mut PairScratch,
    ) -> Result<(), CouplingError> {
        let t_next = s.t + self.h;
        stream.brownian_increment_into(self.h, &mut sc.dw);
        self.em_into(s.x1.as_slice(), self.h, &sc.dw, &mut sc.drift, &mut sc.out1, t_next)?;
        s.x1.as_mut_slice().copy_from_slice(&sc.out1);
        s.x2.as_mut_slice().copy_from_slice(&sc.out1);
        s.t = t_next;
        Ok(())
    }

    fn synchronous_step(
        &self,
        s: &mut CoupledState,
        stream: &mut NoiseStream,
        sc: &mut PairScratch,
    ) -> Result<(), CouplingError> {
        let t_next = s.t + self.h;
        stream.brownian_increment_into(self.h, &mut sc.dw);
        self.em_into(s.x1.as_slice(), self.h, &sc.dw, &mut sc.drift, &mut sc.out1, t_next)?;
        self.em_into(s.x2.as_slice(), self.h, &sc.dw, &mut sc.drift, &mut sc.out2, t_next)?;
        s.x1.as_mut_slice().copy_from_slice(&sc.out1);
        s.x2.as_mut_slice().copy_from_slice(&sc.out2);
        s.t = t_next;
        Ok(())
    }

    /// Second trajectory sees `(I - 2 e e^T) dW` with
    /// `e = sigma^{-1}(x1 - x2) / ||sigma^{-1}(x1 - x2)||`. Expects `sc.dw`
    /// to hold the increment.
    fn reflection_step(&self, s: &mut CoupledState, sc: &mut PairScratch) -> Result<(), CouplingError> {
        let inv = self.sigma_inv.as_ref().expect("reflection requires constant sigma");
        let dim = self.model.dim();
        let x1 = s.x1.as_slice();
        let x2 = s.x2.as_slice();
        let mut norm2 = 0.0;
        for i in 0..dim {
            let mut acc = 0.0;
            for j in 0..dim {
                acc += inv[(i, j)] * (x1[j] - x2[j]);
            }
            sc.e[i] = acc;
            norm2 += acc * acc;
        }
        if norm2 == 0.0 {
            return Err(CouplingError::CoincidentStates);
        }
        let mut e_dot_dw = 0.0;
        for i in 0..dim {
            e_dot_dw += sc.e[i] * sc.dw[i];
        }
        let coef = 2.0 * e_dot_dw / norm2;
        for i in 0..dim {
            sc.dw2[i] = sc.dw[i] - coef * sc.e[i];
        }
        let t_next = s.t + self.h;
        self.em_into(x1, self.h, &sc.dw, &mut sc.drift, &mut sc.out1, t_next)?;
        self.em_into(x2, self.h, &sc.dw2, &mut sc.drift, &mut sc.out2, t_next)?;
        s.x1.as_mut_slice().copy_from_slice(&sc.out1);
        s.x2.as_mut_slice().copy_from_slice(&sc.out2);
        s.t = t_next;
        Ok(())
    }

    /// One-step maximal coupling for the Gaussian Euler-Maruyama kernel:
    /// sample both proposals independently, accept the glue with probability
    /// `r` built from the min/max density ratios at both proposals.
    fn maximal_step(
        &self,
        s: &mut CoupledState,
        stream: &mut NoiseStream,
        sc: &mut PairScratch,
    ) -> Result<(), CouplingError> {
        let kernel = self.kernel.as_ref().expect("maximal requires constant sigma");
        let dim = self.model.dim();
        let t_next = s.t + self.h;
        let sqrt_h = self.h.sqrt();

        // proposal means x + h f(x)
        self.model.drift_into(s.x1.as_slice(), &mut sc.drift);
        for i in 0..dim {
            sc.mu1[i] = s.x1[i] + self.h * sc.drift[i];
        }
        self.model.drift_into(s.x2.as_slice(), &mut sc.drift);
        for i in 0..dim {
            sc.mu2[i] = s.x2[i] + self.h * sc.drift[i];
        }

        let log_r = match kernel {
            KernelShape::Isotropic { s: iso } => {
                stream.fill_standard_normal(&mut sc.z1);
                stream.fill_standard_normal(&mut sc.z2);
                for i in 0..dim {
                    sc.z1[i] = sc.mu1[i] + iso * sqrt_h * sc.z1[i];
                    sc.z2[i] = sc.mu2[i] + iso * sqrt_h * sc.z2[i];
                }
                let inv_var = 1.0 / (iso * iso * self.h);
                let quad = |z: &[f64], mu: &[f64]| -> f64 {
                    let mut acc = 0.0;
                    for i in 0..dim {
                        let d = z[i] - mu[i];
                        acc += d * d;
                    }
                    acc * inv_var
                };
                -0.5 * ((quad(&sc.z1, &sc.mu1) - quad(&sc.z1, &sc.mu2)).abs()
                    + (quad(&sc.z2, &sc.mu1) - quad(&sc.z2, &sc.mu2)).abs())
            }
            KernelShape::General { chol, sigma } => {
                let mut n = DVector::zeros(dim);
                stream.fill_standard_normal(n.as_mut_slice());
                let z1 = DVector::from_column_slice(&sc.mu1) + sigma * &n * sqrt_h;
                stream.fill_standard_normal(n.as_mut_slice());
                let z2 = DVector::from_column_slice(&sc.mu2) + sigma * &n * sqrt_h;
                sc.z1.copy_from_slice(z1.as_slice());
                sc.z2.copy_from_slice(z2.as_slice());
                let quad = |z: &DVector<f64>, mu: &[f64]| -> f64 {
                    let diff = z - DVector::from_column_slice(mu);
                    diff.dot(&chol.solve(&diff)) / self.h
                };
                -0.5 * ((quad(&z1, &sc.mu1) - quad(&z1, &sc.mu2)).abs()
                    + (quad(&z2, &sc.mu1) - quad(&z2, &sc.mu2)).abs())
            }
        };
        let log_r = log_r.min(0.0);

        if !(sc.z1.iter().all(|v| v.is_finite()) && sc.z2.iter().all(|v| v.is_finite())) {
            return Err(CouplingError::Divergence { t: t_next });
        }
        if stream.uniform().ln() < log_r {
            s.x1.as_mut_slice().copy_from_slice(&sc.z2);
            s.x2.as_mut_slice().copy_from_slice(&sc.z2);
            s.coupled = true;
        } else {
            s.x1.as_mut_slice().copy_from_slice(&sc.z1);
            s.x2.as_mut_slice().copy_from_slice(&sc.z2);
        }
        s.t = t_next;
        Ok(())
    }

    /// Degenerate-noise policy: two-step maximal inside the proximity
    /// window, otherwise velocity-noise reflection across `Q` when far from
    /// the contraction hyperplane and synchronous coupling near it.
    fn langevin_step(
        &self,
        s: &mut CoupledState,
        stream: &mut NoiseStream,
        max_dt: f64,
        sc: &mut PairScratch,
    ) -> Result<(), CouplingError> {
        let lang = self.lang.as_ref().expect("langevin-mixed engine");
        let dx = lang.dim_x;
        let in_window = (0..dx).all(|i| (s.x1[i] - s.x2[i]).abs() < lang.wx)
            && (0..dx).all(|i| (s.x1[dx + i] - s.x2[dx + i]).abs() < lang.wv);
        if in_window && max_dt >= 2.0 * self.h * (1.0 - 1e-9) {
            return self.langevin_two_step_maximal(s, stream, sc);
        }

        // Q = dX + dV / gamma, reusing the direction buffer
        let mut q_norm2 = 0.0;
        for i in 0..dx {
            let q = (s.x1[i] - s.x2[i]) + (s.x1[dx + i] - s.x2[dx + i]) / lang.gamma;
            sc.e[i] = q;
            q_norm2 += q * q;
        }
        stream.brownian_increment_into(self.h, &mut sc.dw);
        let t_next = s.t + self.h;
        if q_norm2.sqrt() > lang.q_switch {
            let mut q_dot_dw = 0.0;
            for i in 0..dx {
                q_dot_dw += sc.e[i] * sc.dw[i];
            }
            let coef = 2.0 * q_dot_dw / q_norm2;
            for i in 0..dx {
                sc.dw2[i] = sc.dw[i] - coef * sc.e[i];
            }
            self.em_into(s.x1.as_slice(), self.h, &sc.dw, &mut sc.drift, &mut sc.out1, t_next)?;
            self.em_into(s.x2.as_slice(), self.h, &sc.dw2, &mut sc.drift, &mut sc.out2, t_next)?;
        } else {
            self.em_into(s.x1.as_slice(), self.h, &sc.dw, &mut sc.drift, &mut sc.out1, t_next)?;
            self.em_into(s.x2.as_slice(), self.h, &sc.dw, &mut sc.drift, &mut sc.out2, t_next)?;
        }
        s.x1.as_mut_slice().copy_from_slice(&sc.out1);
        s.x2.as_mut_slice().copy_from_slice(&sc.out2);
        s.t = t_next;
        Ok(())
    }

    /// Maximal coupling on the exact Gaussian law after two steps. The
    /// covariance couples each `(X_i, V_i)` pair identically, so quadratic
    /// forms and sampling reduce to per-coordinate 2x2 arithmetic.
    fn langevin_two_step_maximal(
        &self,
        s: &mut CoupledState,
        stream: &mut NoiseStream,
        sc: &mut PairScratch,
    ) -> Result<(), CouplingError> {
        let lang = self.lang.as_ref().expect("langevin-mixed engine");
        let dx = lang.dim_x;
        let dim = self.model.dim();
        let t_next = s.t + 2.0 * self.h;

        // two drift-only steps give the conditional means
        let two_step_mean =
            |engine: &Self, x: &[f64], drift: &mut [f64], mid: &mut [f64], out: &mut [f64]| {
                engine.model.drift_into(x, drift);
                for i in 0..dim {
                    mid[i] = x[i] + engine.h * drift[i];
                }
                engine.model.drift_into(mid, drift);
                for i in 0..dim {
                    out[i] = mid[i] + engine.h * drift[i];
                }
            };
        two_step_mean(self, s.x1.as_slice(), &mut sc.drift, &mut sc.out1, &mut sc.mu1);
        two_step_mean(self, s.x2.as_slice(), &mut sc.drift, &mut sc.out2, &mut sc.mu2);

        // z = mu + L n with the shared block Cholesky factor
        let sample_into = |z: &mut [f64], mu: &[f64], stream: &mut NoiseStream| {
            for i in 0..dx {
                let n0: f64 = stream.standard_normal();
                let n1: f64 = stream.standard_normal();
                z[i] = mu[i] + lang.l11 * n0;
                z[dx + i] = mu[dx + i] + lang.l21 * n0 + lang.l22 * n1;
            }
        };
        sample_into(&mut sc.z1, &sc.mu1, stream);
        sample_into(&mut sc.z2, &sc.mu2, stream);
        if !(sc.z1.iter().all(|v| v.is_finite()) && sc.z2.iter().all(|v| v.is_finite())) {
            return Err(CouplingError::Divergence { t: t_next });
        }

        let quad = |z: &[f64], mu: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..dx {
                let a = z[i] - mu[i];
                let b = z[dx + i] - mu[dx + i];
                acc += lang.inv_a * a * a + 2.0 * lang.inv_b * a * b + lang.inv_c * b * b;
            }
            acc
        };
        let log_r = -0.5
            * ((quad(&sc.z1, &sc.mu1) - quad(&sc.z1, &sc.mu2)).abs()
                + (quad(&sc.z2, &sc.mu1) - quad(&sc.z2, &sc.mu2)).abs());
        let log_r = log_r.min(0.0);

        if stream.uniform().ln() < log_r {
            s.x1.as_mut_slice().copy_from_slice(&sc.z2);
            s.x2.as_mut_slice().copy_from_slice(&sc.z2);
            s.coupled = true;
        } else {
            s.x1.as_mut_slice().copy_from_slice(&sc.z1);
            s.x2.as_mut_slice().copy_from_slice(&sc.z2);
        }
        s.t = t_next;
        Ok(())
    }
}

/// Returns `s` when the matrix is `s I` with `s != 0`.
fn isotropic_scale(m: &DMatrix<f64>) -> Option<f64> {
    let s = m[(0, 0)];
    if s == 0.0 {
        return None;
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let expect = if i == j { s } else { 0.0 };
            if m[(i, j)] != expect {
                return None;
            }
        }
    }
    Some(s)
}

/// Spec'd single-step entry points. These are convenience wrappers over the
/// engine; long-running drivers should build a [`PolicyEngine`] once.
pub fn reflection_pair_step(
    model: &SdeModel,
    s: &CoupledState,
    h: f64,
    dw: &[f64],
) -> Result<CoupledState, CouplingError> {
    let engine = PolicyEngine::new(model, &CouplingPolicy::new(PolicyKind::Reflection), h)?;
    let mut out = s.clone();
    let mut sc = PairScratch::new(model);
    sc.dw.copy_from_slice(dw);
    engine.reflection_step(&mut out, &mut sc)?;
    Ok(out)
}

pub fn synchronous_pair_step(
    model: &SdeModel,
    s: &CoupledState,
    h: f64,
    dw: &[f64],
) -> Result<CoupledState, CouplingError> {
    let mut out = s.clone();
    let mut scratch = vec![0.0; model.dim()];
    let mut buf = vec![0.0; model.dim()];
    let t_next = out.t + h;
    Scheme::EulerMaruyama
        .step_into(model, s.x1.as_slice(), h, dw, &mut scratch, &mut buf)
        .map_err(|_| CouplingError::Divergence { t: t_next })?;
    out.x1.as_mut_slice().copy_from_slice(&buf);
    Scheme::EulerMaruyama
        .step_into(model, s.x2.as_slice(), h, dw, &mut scratch, &mut buf)
        .map_err(|_| CouplingError::Divergence { t: t_next })?;
    out.x2.as_mut_slice().copy_from_slice(&buf);
    out.t = t_next;
    Ok(out)
}

pub fn maximal_coupling_step(
    model: &SdeModel,
    s: &CoupledState,
    h: f64,
    stream: &mut NoiseStream,
) -> Result<CoupledState, CouplingError> {
    let engine = PolicyEngine::new(model, &CouplingPolicy::new(PolicyKind::Maximal), h)?;
    let mut out = s.clone();
    let mut sc = PairScratch::new(model);
    engine.maximal_step(&mut out, stream, &mut sc)?;
    Ok(out)
}

pub fn mixed_policy_step(
    model: &SdeModel,
    s: &CoupledState,
    h: f64,
    stream: &mut NoiseStream,
) -> Result<CoupledState, CouplingError> {
    let engine = PolicyEngine::new(model, &CouplingPolicy::new(PolicyKind::Mixed), h)?;
    let mut out = s.clone();
    let mut sc = PairScratch::new(model);
    engine.step(&mut out, stream, f64::INFINITY, &mut sc)?;
    Ok(out)
}

pub fn langevin_policy_step(
    model: &SdeModel,
    s: &CoupledState,
    h: f64,
    stream: &mut NoiseStream,
) -> Result<CoupledState, CouplingError> {
    let engine = PolicyEngine::new(model, &CouplingPolicy::new(PolicyKind::LangevinMixed), h)?;
    let mut out = s.clone();
    let mut sc = PairScratch::new(model);
    engine.step(&mut out, stream, f64::INFINITY, &mut sc)?;
    Ok(out)
}

/// Test baseline: both trajectories advance with independent noise. Not part
/// of the certification pipeline.
pub fn independent_pair_step(
    model: &SdeModel,
    s: &CoupledState,
    h: f64,
    stream: &mut NoiseStream,
) -> Result<CoupledState, CouplingError> {
    let mut out = s.clone();
    let mut dw = vec![0.0; model.noise_dim()];
    let mut scratch = vec![0.0; model.dim()];
    let mut buf = vec![0.0; model.dim()];
    let t_next = out.t + h;
    stream.brownian_increment_into(h, &mut dw);
    Scheme::EulerMaruyama
        .step_into(model, s.x1.as_slice(), h, &dw, &mut scratch, &mut buf)
        .map_err(|_| CouplingError::Divergence { t: t_next })?;
    out.x1.as_mut_slice().copy_from_slice(&buf);
    stream.brownian_increment_into(h, &mut dw);
    Scheme::EulerMaruyama
        .step_into(model, s.x2.as_slice(), h, &dw, &mut scratch, &mut buf)
        .map_err(|_| CouplingError::Divergence { t: t_next })?;
    out.x2.as_mut_slice().copy_from_slice(&buf);
    out.t = t_next;
    Ok(out)
}

/// Runs the coupled pair from `(x, y)` until it meets or the horizon `T`
/// (a multiple of `h`) is reached. Divergence is reported as a censored
/// outcome with the `diverged` flag set, never silently dropped.
pub fn coupling_time(
    model: &SdeModel,
    policy: &CouplingPolicy,
    x: &State,
    y: &State,
    h: f64,
    t_horizon: f64,
    stream: &mut NoiseStream,
) -> Result<CouplingOutcome, CouplingError> {
    let engine = PolicyEngine::new(model, policy, h)?;
    coupling_time_with_engine(&engine, x, y, t_horizon, stream)
}

/// Same as [`coupling_time`] but reusing a prebuilt engine (the hot path for
/// Monte Carlo drivers).
pub fn coupling_time_with_engine(
    engine: &PolicyEngine<'_>,
    x: &State,
    y: &State,
    t_horizon: f64,
    stream: &mut NoiseStream,
) -> Result<CouplingOutcome, CouplingError> {
    let h = engine.h();
    let n_steps = crate::integrate::steps_for_horizon(t_horizon, h)?;
    if x == y {
        return Ok(CouplingOutcome::coupled_at(0.0, t_horizon));
    }
    let mut s = CoupledState::new(x.clone(), y.clone());
    let mut sc = PairScratch::new(engine.model);
    let mut k = 0usize;
    while k < n_steps {
        let before = s.t;
        let max_dt = (n_steps - k) as f64 * h;
        match engine.step(&mut s, stream, max_dt, &mut sc) {
            Ok(()) => {}
            Err(CouplingError::Divergence { .. }) => {
                return Ok(CouplingOutcome::censored(t_horizon, true));
            }
            Err(e) => return Err(e),
        }
        let advanced = ((s.t - before) / h).round() as usize;
        k += advanced.max(1);
        if s.coupled {
            return Ok(CouplingOutcome::coupled_at((k as f64) * h, t_horizon));
        }
    }
    Ok(CouplingOutcome::censored(t_horizon, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn pair(x1: Vec<f64>, x2: Vec<f64>) -> CoupledState {
        CoupledState::new(DVector::from_vec(x1), DVector::from_vec(x2))
    }

    fn unit_noise_2d() -> SdeModel {
        SdeModel::new(
            "flat2d",
            2,
            2,
            |_x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            crate::model::DiffusionSpec::Constant(DMatrix::from_diagonal_element(2, 2, 1.0)),
            crate::model::Params::new(),
        )
    }

    use crate::model::SdeModel;
    use nalgebra::DMatrix;

    #[test]
    fn reflection_flips_the_separating_component() {
        let m = unit_noise_2d();
        let s = pair(vec![0.5, 0.0], vec![0.0, 0.0]);
        // e = (1, 0): the first noise component flips for trajectory 2
        let out = reflection_pair_step(&m, &s, 0.01, &[0.3, 0.7]).unwrap();
        assert_relative_eq!(out.x1[0], 0.5 + 0.3, epsilon = 1e-15);
        assert_relative_eq!(out.x1[1], 0.7, epsilon = 1e-15);
        assert_relative_eq!(out.x2[0], -0.3, epsilon = 1e-15);
        assert_relative_eq!(out.x2[1], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn reflection_fixes_orthogonal_noise() {
        let m = unit_noise_2d();
        let s = pair(vec![0.5, 0.0], vec![0.0, 0.0]);
        // dW orthogonal to e is untouched: both see (0, 0.7)
        let out = reflection_pair_step(&m, &s, 0.01, &[0.0, 0.7]).unwrap();
        assert_relative_eq!(out.x2[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(out.x2[1], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn reflection_with_anisotropic_sigma_uses_the_preimage_direction() {
        // sigma = diag(1, 2): e aligns with sigma^{-1} (x1 - x2)
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let m = SdeModel::new(
            "aniso",
            2,
            2,
            |_x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            crate::model::DiffusionSpec::Constant(sigma),
            crate::model::Params::new(),
        );
        let s = pair(vec![1.0, 1.0], vec![0.0, 0.0]);
        // sigma_inv delta = (1, 0.5), normalized e = (2, 1)/sqrt(5)
        let dw = [1.0, 0.0];
        let out = reflection_pair_step(&m, &s, 0.01, &dw).unwrap();
        let e = [2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()];
        let coef = 2.0 * (e[0] * dw[0] + e[1] * dw[1]);
        let expected = [dw[0] - coef * e[0], dw[1] - coef * e[1]];
        assert_relative_eq!(out.x2[0], 1.0 * expected[0], epsilon = 1e-12);
        assert_relative_eq!(out.x2[1], 2.0 * expected[1], epsilon = 1e-12);
    }

    #[test]
    fn reflection_rejects_coincident_states() {
        let m = unit_noise_2d();
        let s = pair(vec![0.1, 0.2], vec![0.1, 0.2]);
        assert!(matches!(
            reflection_pair_step(&m, &s, 0.01, &[0.1, 0.1]),
            Err(CouplingError::CoincidentStates)
        ));
    }

    #[test]
    fn synchronous_difference_decays_deterministically() {
        // f(x) = -x: the noise cancels in the difference, |d'| = (1-h)|d|
        let m = SdeModel::new(
            "ou",
            1,
            1,
            |x: &[f64], out: &mut [f64]| out[0] = -x[0],
            crate::model::DiffusionSpec::Constant(DMatrix::from_element(1, 1, 1.0)),
            crate::model::Params::new(),
        );
        let mut s = pair(vec![1.0], vec![0.0]);
        let h = 0.1;
        for k in 1..=5 {
            s = synchronous_pair_step(&m, &s, h, &[0.37]).unwrap();
            let delta = (s.x1[0] - s.x2[0]).abs();
            assert_relative_eq!(delta, (1.0f64 - h).powi(k), epsilon = 1e-12);
        }
    }

    #[test]
    fn synchronous_preserves_equality() {
        let m = unit_noise_2d();
        let s = pair(vec![0.3, -0.4], vec![0.3, -0.4]);
        let out = synchronous_pair_step(&m, &s, 0.05, &[0.2, -0.1]).unwrap();
        assert_eq!(out.x1, out.x2);
    }

    #[test]
    fn maximal_couples_identical_states_with_probability_one() {
        let m = unit_noise_2d();
        let mut stream = NoiseStream::new(11, 0);
        for trial in 0..50 {
            let s = CoupledState {
                x1: DVector::from_vec(vec![0.2, 0.4]),
                x2: DVector::from_vec(vec![0.2, 0.4]),
                coupled: false,
                t: 0.0,
            };
            let out = maximal_coupling_step(&m, &s, 0.01, &mut stream).unwrap();
            assert!(out.coupled, "trial {trial} failed to couple identical densities");
            assert_eq!(out.x1, out.x2);
        }
    }

    #[test]
    fn maximal_rarely_couples_distant_states() {
        // means 5 standard deviations apart: coupling probability is far
        // below 1%, so 2000 trials should see none
        let m = SdeModel::new(
            "flat1d",
            1,
            1,
            |_x: &[f64], out: &mut [f64]| out[0] = 0.0,
            crate::model::DiffusionSpec::Constant(DMatrix::from_element(1, 1, 1.0)),
            crate::model::Params::new(),
        );
        let mut stream = NoiseStream::new(5, 1);
        let mut coupled = 0;
        for _ in 0..2000 {
            let s = pair(vec![0.0], vec![0.5]);
            let out = maximal_coupling_step(&m, &s, 0.01, &mut stream).unwrap();
            if out.coupled {
                coupled += 1;
            }
        }
        assert!(coupled < 20, "coupled {coupled}/2000 at 5 sigma separation");
    }

    #[test]
    fn general_kernel_agrees_with_isotropic_fast_path() {
        // a negligible off-diagonal entry defeats the exact isotropy check
        // and routes through the general Cholesky path; with the same stream
        // both paths must produce numerically identical maximal steps
        let iso = unit_noise_2d();
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 1e-18, 0.0, 1.0]);
        let m_general = SdeModel::new(
            "flat2d-general",
            2,
            2,
            |_x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            crate::model::DiffusionSpec::Constant(skew),
            crate::model::Params::new(),
        );
        let s = pair(vec![0.05, 0.0], vec![0.0, 0.0]);
        let mut st1 = NoiseStream::new(314, 0);
        let mut st2 = NoiseStream::new(314, 0);
        let a = maximal_coupling_step(&iso, &s, 0.01, &mut st1).unwrap();
        let b = maximal_coupling_step(&m_general, &s, 0.01, &mut st2).unwrap();
        assert_relative_eq!(a.x1[0], b.x1[0], epsilon = 1e-9);
        assert_relative_eq!(a.x2[1], b.x2[1], epsilon = 1e-9);
        assert_eq!(a.coupled, b.coupled);
    }

    #[test]
    fn mixed_policy_branches_on_the_distance_threshold() {
        let m = unit_noise_2d();
        let h: f64 = 0.01;
        // threshold = 2 sqrt(h) ||sigma|| = 0.2
        let far = pair(vec![10.0 * h.sqrt(), 0.0], vec![0.0, 0.0]);
        let mut s1 = NoiseStream::new(77, 0);
        let mut s2 = NoiseStream::new(77, 0);
        let via_mixed = mixed_policy_step(&m, &far, h, &mut s1).unwrap();
        let mut dw = vec![0.0; 2];
        s2.brownian_increment_into(h, &mut dw);
        let via_reflection = reflection_pair_step(&m, &far, h, &dw).unwrap();
        assert_eq!(via_mixed.x1, via_reflection.x1);
        assert_eq!(via_mixed.x2, via_reflection.x2);

        let near = pair(vec![0.5 * h.sqrt(), 0.0], vec![0.0, 0.0]);
        let mut s3 = NoiseStream::new(78, 0);
        let mut s4 = NoiseStream::new(78, 0);
        let via_mixed = mixed_policy_step(&m, &near, h, &mut s3).unwrap();
        let via_maximal = maximal_coupling_step(&m, &near, h, &mut s4).unwrap();
        assert_eq!(via_mixed.x1, via_maximal.x1);
        assert_eq!(via_mixed.x2, via_maximal.x2);
    }

    #[test]
    fn langevin_synchronous_branch_on_the_hyperplane() {
        let m = model::langevin_ring(0.5, 1.0);
        let h = 0.001;
        // dV = -gamma dX puts the pair exactly on Q = 0, far outside the
        // two-step proximity window: dX = (-0.5, 0), dV = (0.5, 0)
        let x1 = vec![1.0, 0.0, 0.5, 0.3];
        let x2 = vec![1.5, 0.0, 0.0, 0.3];
        let s = pair(x1.clone(), x2.clone());
        let out = langevin_policy_step(&m, &s, h, &mut NoiseStream::new(3, 3)).unwrap();
        // synchronous branch: velocity noise identical, so dV evolves
        // deterministically: dV' = (1 - gamma h) dV - h (grad U(x1) - grad U(x2))
        let g = |p: &[f64]| {
            let s = p[0] * p[0] + p[1] * p[1] - 1.0;
            [4.0 * p[0] * s, 4.0 * p[1] * s]
        };
        let g1 = g(&x1[0..2]);
        let g2 = g(&x2[0..2]);
        for i in 0..2 {
            let dv = x1[2 + i] - x2[2 + i];
            let expect = (1.0 - 1.0 * h) * dv - h * (g1[i] - g2[i]);
            assert_relative_eq!(out.x1[2 + i] - out.x2[2 + i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn langevin_reflection_branch_flips_q_aligned_noise() {
        let m = model::langevin_ring(0.5, 1.0);
        let h = 0.001;
        // ||Q|| = 0.1 > q_switch = 0.08
        let x1 = vec![1.0, 0.0, 0.0, 0.0];
        let x2 = vec![0.9, 0.0, 0.0, 0.0];
        let s = pair(x1.clone(), x2.clone());
        let mut stream = NoiseStream::new(21, 4);
        let out = langevin_policy_step(&m, &s, h, &mut stream).unwrap();
        // recover the two velocity increments from the updates
        let recover = |x_new: &DVector<f64>, x_old: &[f64]| {
            let lvl = x_old[0] * x_old[0] + x_old[1] * x_old[1] - 1.0;
            let grad = [4.0 * x_old[0] * lvl, 4.0 * x_old[1] * lvl];
            [
                x_new[2] - x_old[2] - h * (-grad[0] - 1.0 * x_old[2]),
                x_new[3] - x_old[3] - h * (-grad[1] - 1.0 * x_old[3]),
            ]
        };
        let n1 = recover(&out.x1, &x1);
        let n2 = recover(&out.x2, &x2);
        // q_hat = (1, 0): first component flips, second is preserved
        assert_relative_eq!(n2[0] / 0.5, -n1[0] / 0.5, epsilon = 1e-12);
        assert_relative_eq!(n2[1], n1[1], epsilon = 1e-12);
    }

    #[test]
    fn langevin_two_step_window_can_couple() {
        let m = model::langevin_ring(0.5, 1.0);
        let h: f64 = 0.001;
        // a separation of 2% of the window is ~0.07 Mahalanobis units of
        // the two-step law, so most attempts should accept
        let eps_x = 0.02 * 2.5 * 0.5 * h * h.sqrt();
        let x1 = vec![1.0, 0.0, 0.1, -0.2];
        let x2 = vec![1.0 + eps_x, 0.0, 0.1, -0.2];
        let mut stream = NoiseStream::new(55, 0);
        let mut coupled = 0;
        for _ in 0..200 {
            let s = pair(x1.clone(), x2.clone());
            let out = langevin_policy_step(&m, &s, h, &mut stream).unwrap();
            // the attempt advances two steps
            assert_relative_eq!(out.t, 2.0 * h, epsilon = 1e-15);
            if out.coupled {
                coupled += 1;
                assert_eq!(out.x1, out.x2);
            }
        }
        assert!(coupled > 100, "window attempts coupled only {coupled}/200");
    }

    #[test]
    fn coupling_time_zero_for_equal_starts() {
        let m = model::ring(0.5);
        let policy = CouplingPolicy::new(PolicyKind::Mixed);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let out =
            coupling_time(&m, &policy, &x, &x, 0.01, 1.0, &mut NoiseStream::new(0, 0)).unwrap();
        assert!(out.coupled);
        assert_eq!(out.tau, Some(0.0));
    }

    #[test]
    fn synchronous_policy_never_meets_exactly_on_the_ring() {
        let m = model::ring(0.5);
        let policy = CouplingPolicy::new(PolicyKind::Synchronous);
        let engine = PolicyEngine::new(&m, &policy, 0.01).unwrap();
        let mut s = pair(vec![1.0, 0.0], vec![-1.0, 0.0]);
        let mut sc = PairScratch::new(&m);
        let mut stream = NoiseStream::new(13, 13);
        for _ in 0..10_000 {
            engine.step(&mut s, &mut stream, f64::INFINITY, &mut sc).unwrap();
            assert!(s.x1 != s.x2, "synchronous coupling met exactly at t = {}", s.t);
        }
    }

    #[test]
    fn censoring_at_the_horizon() {
        let m = model::ring(0.5);
        let policy = CouplingPolicy::new(PolicyKind::Synchronous);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-1.0, 0.0]);
        let out = coupling_time(&m, &policy, &x, &y, 0.01, 0.5, &mut NoiseStream::new(1, 1)).unwrap();
        assert!(!out.coupled);
        assert_eq!(out.tau, None);
        assert!(!out.diverged);
    }

    #[test]
    fn absorption_after_coupling() {
        let m = unit_noise_2d();
        let policy = CouplingPolicy::new(PolicyKind::Mixed);
        let engine = PolicyEngine::new(&m, &policy, 0.01).unwrap();
        let mut stream = NoiseStream::new(2024, 8);
        let mut s = pair(vec![0.05, 0.0], vec![0.0, 0.0]);
        let mut sc = PairScratch::new(&m);
        let mut met = false;
        for _ in 0..5000 {
            engine.step(&mut s, &mut stream, f64::INFINITY, &mut sc).unwrap();
            if s.coupled {
                met = true;
                // once coupled, stays glued exactly
                for _ in 0..50 {
                    engine.step(&mut s, &mut stream, f64::INFINITY, &mut sc).unwrap();
                    assert!(s.coupled);
                    assert_eq!(s.x1, s.x2);
                }
                break;
            }
        }
        assert!(met, "mixed policy failed to couple two nearby free particles");
    }

    #[test]
    fn divergence_is_a_censored_outcome() {
        // cubic explosion with a large step
        let m = SdeModel::new(
            "explode",
            1,
            1,
            |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] * x[0],
            crate::model::DiffusionSpec::Constant(DMatrix::from_element(1, 1, 1.0)),
            crate::model::Params::new(),
        );
        let policy = CouplingPolicy::new(PolicyKind::Synchronous);
        let x = DVector::from_vec(vec![50.0]);
        let y = DVector::from_vec(vec![-50.0]);
        let out = coupling_time(&m, &policy, &x, &y, 1.0, 20.0, &mut NoiseStream::new(4, 2)).unwrap();
        assert!(out.diverged);
        assert!(!out.coupled);
    }
}
