//! Underdamped Langevin dynamics in the plane with the ring potential
//! `U(X) = (X1^2 + X2^2 - 1)^2`:
//!
//! ```text
//! dX = V dt
//! dV = -grad U(X) dt - gamma V dt + sigma dW
//! ```
//!
//! Noise acts on the velocities only, so the diffusion is degenerate: the
//! 4x2 coefficient has zero rows for the position block. The invariant
//! density is `exp(-beta (U(X) + |V|^2 / 2))` with `beta = 2 gamma / sigma^2`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{get_param, LangevinStructure, ModelError, Params, RunDefaults, SdeModel};
use crate::estimators::OmegaBox;

fn grad_ring_potential(x: &[f64], out: &mut [f64]) {
    let s = x[0] * x[0] + x[1] * x[1] - 1.0;
    out[0] = 4.0 * x[0] * s;
    out[1] = 4.0 * x[1] * s;
}

/// State layout: `(X1, X2, V1, V2)`; noise dimension 2 (velocities).
pub fn langevin_ring(sigma: f64, gamma: f64) -> SdeModel {
    assert!(sigma > 0.0 && gamma > 0.0, "langevin-ring: sigma and gamma must be positive");
    let mut params = Params::new();
    params.insert("sigma".into(), sigma);
    params.insert("gamma".into(), gamma);
    let mut diffusion = DMatrix::zeros(4, 2);
    diffusion[(2, 0)] = sigma;
    diffusion[(3, 1)] = sigma;
    let beta = 2.0 * gamma / (sigma * sigma);
    SdeModel::new(
        "langevin-ring",
        4,
        2,
        move |x: &[f64], out: &mut [f64]| {
            let mut grad = [0.0; 2];
            grad_ring_potential(&x[0..2], &mut grad);
            out[0] = x[2];
            out[1] = x[3];
            out[2] = -grad[0] - gamma * x[2];
            out[3] = -grad[1] - gamma * x[3];
        },
        super::DiffusionSpec::Constant(diffusion),
        params,
    )
    .with_analytic_log_density(move |x: &[f64]| {
        let s = x[0] * x[0] + x[1] * x[1] - 1.0;
        let u = s * s;
        let kinetic = 0.5 * (x[2] * x[2] + x[3] * x[3]);
        -beta * (u + kinetic)
    })
    .with_langevin_structure(LangevinStructure {
        dim_x: 2,
        gamma,
        sigma,
        grad_u: Arc::new(grad_ring_potential),
    })
}

pub(super) fn entry(params: &Params) -> Result<(SdeModel, RunDefaults), ModelError> {
    let sigma = get_param(params, "sigma");
    let gamma = get_param(params, "gamma");
    if sigma <= 0.0 || gamma <= 0.0 {
        return Err(ModelError::InvalidParameter(
            "langevin-ring: sigma and gamma must be positive".into(),
        ));
    }
    let defaults = RunDefaults {
        omega: OmegaBox::new(vec![-3.0, -3.0, -6.0, -6.0], vec![3.0, 3.0, 6.0, 6.0])
            .expect("static box"),
        h: 0.001,
        t_horizon: 40.0,
        x0: DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
    };
    Ok((langevin_ring(sigma, gamma), defaults))
}
