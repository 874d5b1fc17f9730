//! SDE model abstraction and the built-in benchmark systems.
//!
//! A model is `dX_t = f(X_t) dt + sigma(X_t) dW_t` with drift `f: R^n -> R^n`
//! and an `n x m` diffusion coefficient. All built-in systems carry constant
//! diffusion; state-dependent diagonal diffusion is supported for custom
//! models (with a hand-coded derivative for the Milstein correction).

mod double_well;
mod fhn;
mod langevin_ring;
mod lorenz96;
mod ring;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimators::OmegaBox;

pub use double_well::double_well;
pub use fhn::fhn_network;
pub use langevin_ring::langevin_ring;
pub use lorenz96::lorenz96;
pub use ring::ring;

/// State of the SDE: a point in R^n.
pub type State = DVector<f64>;

/// Named parameter set for a model.
pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model `{0}` has no analytic invariant density")]
    NoAnalyticDensity(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// How the diffusion coefficient depends on the state.
#[derive(Clone)]
pub enum DiffusionSpec {
    /// Constant `n x m` matrix.
    Constant(DMatrix<f64>),
    /// Diagonal, state-dependent: noise component i drives coordinate i.
    /// `dsigma` is the hand-coded derivative `d sigma_i / d x_i` used by the
    /// Milstein correction.
    Diagonal { sigma: VecField, dsigma: VecField },
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionSpec::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            DiffusionSpec::Diagonal { .. } => write!(f, "Diagonal"),
        }
    }
}

/// Structural data for kinetic (position/velocity) models with noise on the
/// velocity block only. Needed by the degenerate-noise coupling policy and
/// the two-step transition density.
#[derive(Clone)]
pub struct LangevinStructure {
    /// Positions occupy coordinates `0..dim_x`, velocities `dim_x..2*dim_x`.
    pub dim_x: usize,
    /// Friction coefficient.
    pub gamma: f64,
    /// Scalar noise strength on each velocity coordinate.
    pub sigma: f64,
    /// Gradient of the potential, written into a `dim_x` buffer.
    pub grad_u: VecField,
}

impl fmt::Debug for LangevinStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LangevinStructure")
            .field("dim_x", &self.dim_x)
            .field("gamma", &self.gamma)
            .field("sigma", &self.sigma)
            .finish()
    }
}

/// An SDE `dX = f(X) dt + sigma(X) dW` together with optional analytic
/// knowledge about its invariant measure.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    dim: usize,
    noise_dim: usize,
    drift: VecField,
    diffusion: DiffusionSpec,
    params: Params,
    /// Log of the unnormalized invariant density, when known.
    analytic_log_density: Option<ScalarField>,
    langevin: Option<LangevinStructure>,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("diffusion", &self.diffusion)
            .field("params", &self.params)
            .finish()
    }
}

impl SdeModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: DiffusionSpec,
        params: Params,
    ) -> Self {
        assert!(dim > 0 && noise_dim > 0, "model dimensions must be positive");
        if let DiffusionSpec::Constant(m) = &diffusion {
            assert_eq!(m.nrows(), dim, "diffusion rows must equal dim");
            assert_eq!(m.ncols(), noise_dim, "diffusion cols must equal noise_dim");
        }
        SdeModel {
            name: name.into(),
            dim,
            noise_dim,
            drift: Arc::new(drift),
            diffusion,
            params,
            analytic_log_density: None,
            langevin: None,
        }
    }

    pub fn with_analytic_log_density(
        mut self,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.analytic_log_density = Some(Arc::new(f));
        self
    }

    pub fn with_langevin_structure(mut self, s: LangevinStructure) -> Self {
        assert_eq!(2 * s.dim_x, self.dim, "kinetic state must be (X, V)");
        self.langevin = Some(s);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn langevin_structure(&self) -> Option<&LangevinStructure> {
        self.langevin.as_ref()
    }

    pub fn diffusion_spec(&self) -> &DiffusionSpec {
        &self.diffusion
    }

    fn check_dim(&self, x: &State) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Drift `f(x)`.
    pub fn drift(&self, x: &State) -> Result<State, ModelError> {
        self.check_dim(x)?;
        let mut out = DVector::zeros(self.dim);
        self.drift_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Drift evaluated into a caller-owned buffer; no dimension check.
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    /// Diffusion coefficient `sigma(x)` materialized as an `n x m` matrix.
    pub fn diffusion(&self, x: &State) -> Result<DMatrix<f64>, ModelError> {
        self.check_dim(x)?;
        match &self.diffusion {
            DiffusionSpec::Constant(m) => Ok(m.clone()),
            DiffusionSpec::Diagonal { sigma, .. } => {
                let mut diag = vec![0.0; self.dim];
                sigma(x.as_slice(), &mut diag);
                Ok(DMatrix::from_diagonal(&DVector::from_vec(diag)))
            }
        }
    }

    /// Adds `sigma(x) * dw` to `out`; no dimension checks.
    #[inline]
    pub fn add_noise_into(&self, x: &[f64], dw: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            DiffusionSpec::Constant(m) => {
                for i in 0..self.dim {
                    let mut acc = 0.0;
                    for j in 0..self.noise_dim {
                        acc += m[(i, j)] * dw[j];
                    }
                    out[i] += acc;
                }
            }
            DiffusionSpec::Diagonal { sigma, .. } => {
                let mut diag = vec![0.0; self.dim];
                sigma(x, &mut diag);
                for i in 0..self.dim {
                    out[i] += diag[i] * dw[i];
                }
            }
        }
    }

    pub fn is_constant_diffusion(&self) -> bool {
        matches!(self.diffusion, DiffusionSpec::Constant(_))
    }

    pub fn constant_sigma(&self) -> Option<&DMatrix<f64>> {
        match &self.diffusion {
            DiffusionSpec::Constant(m) => Some(m),
            _ => None,
        }
    }

    /// Operator 2-norm of the constant diffusion matrix, when constant.
    pub fn sigma_operator_norm(&self) -> Option<f64> {
        self.constant_sigma()
            .map(|m| m.clone().singular_values().max())
    }

    /// Unnormalized invariant density at `x`.
    pub fn analytic_density(&self, x: &State) -> Result<f64, ModelError> {
        Ok(self.analytic_log_density(x)?.exp())
    }

    /// Log of the unnormalized invariant density at `x`.
    pub fn analytic_log_density(&self, x: &State) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        match &self.analytic_log_density {
            Some(f) => Ok(f(x.as_slice())),
            None => Err(ModelError::NoAnalyticDensity(self.name.clone())),
        }
    }

    pub fn has_analytic_density(&self) -> bool {
        self.analytic_log_density.is_some()
    }

    /// Normalizing constant of the analytic density over `box_`, by adaptive
    /// midpoint quadrature.
    pub fn density_normalizer(
        &self,
        box_: &OmegaBox,
        base_resolution: usize,
    ) -> Result<f64, ModelError> {
        let f = self
            .analytic_log_density
            .clone()
            .ok_or_else(|| ModelError::NoAnalyticDensity(self.name.clone()))?;
        crate::numeric::adaptive_box_integral(
            &|p: &[f64]| f(p).exp(),
            box_.lower(),
            box_.upper(),
            base_resolution,
            1e-9,
            8,
        )
        .map_err(|e| ModelError::InvalidParameter(format!("density normalizer: {e}")))
    }
}

/// Run-scale defaults bundled with each catalog model.
#[derive(Debug, Clone)]
pub struct RunDefaults {
    pub omega: OmegaBox,
    pub h: f64,
    pub t_horizon: f64,
    pub x0: State,
}

/// A named builder in the model catalog.
pub struct ModelCatalogEntry {
    pub name: &'static str,
    pub default_params: Params,
    builder: fn(&Params) -> Result<(SdeModel, RunDefaults), ModelError>,
}

impl ModelCatalogEntry {
    pub fn build(&self, overrides: &Params) -> Result<(SdeModel, RunDefaults), ModelError> {
        let mut params = self.default_params.clone();
        for (k, v) in overrides {
            if !params.contains_key(k) {
                return Err(ModelError::InvalidParameter(format!(
                    "model `{}` has no parameter `{}`",
                    self.name, k
                )));
            }
            params.insert(k.clone(), *v);
        }
        (self.builder)(&params)
    }
}

fn params_from(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub(crate) fn get_param(params: &Params, key: &str) -> f64 {
    *params
        .get(key)
        .unwrap_or_else(|| panic!("catalog builder missing parameter `{key}`"))
}

/// The built-in benchmark systems.
pub fn catalog() -> Vec<ModelCatalogEntry> {
    vec![
        ModelCatalogEntry {
            name: "ring",
            default_params: params_from(&[("sigma", 0.5)]),
            builder: ring::entry,
        },
        ModelCatalogEntry {
            name: "double-well",
            default_params: params_from(&[("r", 5.0), ("sigma", 1.2)]),
            builder: double_well::entry,
        },
        ModelCatalogEntry {
            name: "langevin-ring",
            default_params: params_from(&[("sigma", 0.5), ("gamma", 1.0)]),
            builder: langevin_ring::entry,
        },
        ModelCatalogEntry {
            name: "lorenz96",
            default_params: params_from(&[("d", 4.0), ("f", 8.0), ("sigma", 3.0)]),
            builder: lorenz96::entry,
        },
        ModelCatalogEntry {
            name: "fhn",
            default_params: params_from(&[
                ("n", 2.0),
                ("mu", 0.1),
                ("d_u", 0.03),
                ("w", 0.3),
                ("a", 1.05),
                ("sigma", 0.6),
            ]),
            builder: fhn::entry,
        },
    ]
}

/// Instantiates a catalog model by name with parameter overrides.
pub fn instantiate(name: &str, overrides: &Params) -> Result<(SdeModel, RunDefaults), ModelError> {
    catalog()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| ModelError::UnknownModel(name.to_string()))?
        .build(overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_models_instantiate() {
        for entry in catalog() {
            let (model, defaults) = entry.build(&Params::new()).unwrap();
            assert_eq!(model.dim(), defaults.x0.len());
            assert_eq!(defaults.omega.dim(), model.dim());
            assert!(defaults.h > 0.0);
            assert!(defaults.t_horizon > 0.0);
            // Drift and diffusion evaluate with declared shapes at x0.
            let f = model.drift(&defaults.x0).unwrap();
            assert_eq!(f.len(), model.dim());
            let s = model.diffusion(&defaults.x0).unwrap();
            assert_eq!(s.nrows(), model.dim());
            assert_eq!(s.ncols(), model.noise_dim());
        }
    }

    #[test]
    fn unknown_model_is_rejected() {
        assert!(matches!(
            instantiate("no-such-model", &Params::new()),
            Err(ModelError::UnknownModel(_))
        ));
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut p = Params::new();
        p.insert("bogus".into(), 1.0);
        assert!(matches!(
            instantiate("ring", &p),
            Err(ModelError::InvalidParameter(_))
        ));
    }

    #[test]
    fn dimension_mismatch_detected() {
        let (model, _) = instantiate("ring", &Params::new()).unwrap();
        let bad = State::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            model.drift(&bad),
            Err(ModelError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }
}
