//! Scalar gradient flow in an asymmetric double-well potential with additive
//! noise. The quartic wells are joined C^1 to quadratic tails so the drift
//! stays Lipschitz at large |x|.
//!
//! ```text
//! V(x) = 6 x^2 - 60                      x >= 4
//!        x^4/4 - 2 x^2 + 4               0 <= x < 4
//!        r^4 x^4/4 - 2 r^2 x^2 + 4       -4/r <= x < 0
//!        6 r^2 x^2 - 60                  x < -4/r
//! ```
//!
//! Local minima sit at `x = 2` (with `V = 0`) and `x = -2/r`. For `r != 1`
//! the wells are asymmetric and the narrow left well carries steep forces.

use nalgebra::{DMatrix, DVector};

use super::{get_param, ModelError, Params, RunDefaults, SdeModel};
use crate::estimators::OmegaBox;

pub fn double_well_potential(r: f64, x: f64) -> f64 {
    if x >= 4.0 {
        6.0 * x * x - 60.0
    } else if x >= 0.0 {
        0.25 * x.powi(4) - 2.0 * x * x + 4.0
    } else if x >= -4.0 / r {
        let r2 = r * r;
        0.25 * r2 * r2 * x.powi(4) - 2.0 * r2 * x * x + 4.0
    } else {
        6.0 * r * r * x * x - 60.0
    }
}

pub fn double_well_potential_deriv(r: f64, x: f64) -> f64 {
    if x >= 4.0 {
        12.0 * x
    } else if x >= 0.0 {
        x.powi(3) - 4.0 * x
    } else if x >= -4.0 / r {
        let r2 = r * r;
        r2 * r2 * x.powi(3) - 4.0 * r2 * x
    } else {
        12.0 * r * r * x
    }
}

/// `dX = -V'(X) dt + sigma dW`
pub fn double_well(r: f64, sigma: f64) -> SdeModel {
    assert!(r > 0.0 && sigma > 0.0, "double-well: r and sigma must be positive");
    let mut params = Params::new();
    params.insert("r".into(), r);
    params.insert("sigma".into(), sigma);
    SdeModel::new(
        "double-well",
        1,
        1,
        move |x: &[f64], out: &mut [f64]| {
            out[0] = -double_well_potential_deriv(r, x[0]);
        },
        super::DiffusionSpec::Constant(DMatrix::from_element(1, 1, sigma)),
        params,
    )
    // Gibbs form for the gradient flow; V is shifted so the right minimum
    // has V = 0 and density 1.
    .with_analytic_log_density(move |x: &[f64]| {
        -2.0 * double_well_potential(r, x[0]) / (sigma * sigma)
    })
}

pub(super) fn entry(params: &Params) -> Result<(SdeModel, RunDefaults), ModelError> {
    let r = get_param(params, "r");
    let sigma = get_param(params, "sigma");
    if r <= 0.0 || sigma <= 0.0 {
        return Err(ModelError::InvalidParameter(
            "double-well: r and sigma must be positive".into(),
        ));
    }
    let defaults = RunDefaults {
        omega: OmegaBox::new(vec![-2.0], vec![4.0]).expect("static box"),
        h: 0.0025,
        t_horizon: 50.0,
        x0: DVector::from_vec(vec![2.0]),
    };
    Ok((double_well(r, sigma), defaults))
}
