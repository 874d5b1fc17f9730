//! Lorenz 96 system with additive noise on every coordinate:
//!
//! ```text
//! dX^i = ((X^{i+1} - X^{i-2}) X^{i-1} - X^i + F) dt + sigma dW^i
//! ```
//!
//! Indices wrap cyclically (`X^0 = X^D`, `X^{-1} = X^{D-1}`, `X^{D+1} = X^1`).
//! With `D = 4` the deterministic flow has a large periodic orbit; chaos sets
//! in for `D >= 5`.

use nalgebra::{DMatrix, DVector};

use super::{get_param, ModelError, Params, RunDefaults, SdeModel};
use crate::estimators::OmegaBox;

pub fn lorenz96(d: usize, forcing: f64, sigma: f64) -> SdeModel {
    assert!(d >= 4, "lorenz96: need at least 4 coordinates");
    assert!(sigma > 0.0, "lorenz96: sigma must be positive");
    let mut params = Params::new();
    params.insert("d".into(), d as f64);
    params.insert("f".into(), forcing);
    params.insert("sigma".into(), sigma);
    SdeModel::new(
        "lorenz96",
        d,
        d,
        move |x: &[f64], out: &mut [f64]| {
            for i in 0..d {
                let ip1 = (i + 1) % d;
                let im1 = (i + d - 1) % d;
                let im2 = (i + d - 2) % d;
                out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
            }
        },
        super::DiffusionSpec::Constant(DMatrix::from_diagonal_element(d, d, sigma)),
        params,
    )
}

pub(super) fn entry(params: &Params) -> Result<(SdeModel, RunDefaults), ModelError> {
    let d_raw = get_param(params, "d");
    let d = d_raw as usize;
    if d_raw.fract() != 0.0 || d < 4 {
        return Err(ModelError::InvalidParameter(
            "lorenz96: d must be an integer >= 4".into(),
        ));
    }
    let forcing = get_param(params, "f");
    let sigma = get_param(params, "sigma");
    if sigma <= 0.0 {
        return Err(ModelError::InvalidParameter("lorenz96: sigma must be positive".into()));
    }
    let defaults = RunDefaults {
        omega: OmegaBox::new(vec![-16.0; d], vec![19.0; d]).expect("static box"),
        h: 1e-4,
        t_horizon: 3.0,
        x0: DVector::from_element(d, forcing),
    };
    Ok((lorenz96(d, forcing, sigma), defaults))
}
