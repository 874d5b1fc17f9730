//! Small shared numerical helpers: least-squares lines and box quadrature.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("least-squares fit needs at least {need} points with distinct abscissae, got {got}")]
    DegenerateFit { need: usize, got: usize },
    #[error("quadrature did not converge: relative change {rel_change:.3e} after {levels} refinements")]
    QuadratureNotConverged { rel_change: f64, levels: usize },
}

/// Ordinary least squares for `y = a + b x`. Returns `(a, b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), NumericError> {
    assert_eq!(xs.len(), ys.len(), "linear_fit: length mismatch");
    let n = xs.len();
    if n < 2 {
        return Err(NumericError::DegenerateFit { need: 2, got: n });
    }
    let nf = n as f64;
    let mean_x = xs.iter().sum::<f64>() / nf;
    let mean_y = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(NumericError::DegenerateFit { need: 2, got: n });
    }
    let slope = sxy / sxx;
    Ok((mean_y - slope * mean_x, slope))
}

/// Midpoint-rule integral of `f` over an axis-aligned box at the given
/// per-axis resolution.
pub fn midpoint_integral(
    f: &dyn Fn(&[f64]) -> f64,
    lower: &[f64],
    upper: &[f64],
    resolution: &[usize],
) -> f64 {
    let dim = lower.len();
    assert_eq!(upper.len(), dim);
    assert_eq!(resolution.len(), dim);
    let widths: Vec<f64> = lower
        .iter()
        .zip(upper)
        .zip(resolution)
        .map(|((&lo, &hi), &r)| (hi - lo) / r as f64)
        .collect();
    let cell_vol: f64 = widths.iter().product();
    let n_cells: usize = resolution.iter().product();
    let mut point = vec![0.0; dim];
    let mut sum = 0.0;
    for flat in 0..n_cells {
        let mut rem = flat;
        for k in (0..dim).rev() {
            let idx = rem % resolution[k];
            rem /= resolution[k];
            point[k] = lower[k] + (idx as f64 + 0.5) * widths[k];
        }
        sum += f(&point);
    }
    sum * cell_vol
}

/// Integral of `f` over a box with successive mesh doubling until the value
/// stabilizes to `rel_tol` (or the refinement budget runs out).
pub fn adaptive_box_integral(
    f: &dyn Fn(&[f64]) -> f64,
    lower: &[f64],
    upper: &[f64],
    base_resolution: usize,
    rel_tol: f64,
    max_refinements: usize,
) -> Result<f64, NumericError> {
    let dim = lower.len();
    let mut res = vec![base_resolution; dim];
    let mut prev = midpoint_integral(f, lower, upper, &res);
    let mut rel_change = f64::INFINITY;
    for level in 1..=max_refinements {
        for r in res.iter_mut() {
            *r *= 2;
        }
        let cur = midpoint_integral(f, lower, upper, &res);
        rel_change = if cur != 0.0 {
            ((cur - prev) / cur).abs()
        } else {
            (cur - prev).abs()
        };
        if rel_change <= rel_tol {
            return Ok(cur);
        }
        prev = cur;
        let _ = level;
    }
    Err(NumericError::QuadratureNotConverged {
        rel_change,
        levels: max_refinements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 5.0, 9.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.25 - 3.0 * x).collect();
        let (a, b) = linear_fit(&xs, &ys).unwrap();
        assert_relative_eq!(a, 0.25, epsilon = 1e-12);
        assert_relative_eq!(b, -3.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_fit_rejects_single_point() {
        assert!(linear_fit(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn linear_fit_rejects_constant_abscissa() {
        assert!(linear_fit(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn midpoint_matches_polynomial_integral() {
        // int_0^1 int_0^1 x y dx dy = 1/4; midpoint is exact for bilinear.
        let f = |p: &[f64]| p[0] * p[1];
        let v = midpoint_integral(&f, &[0.0, 0.0], &[1.0, 1.0], &[16, 16]);
        assert_relative_eq!(v, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn adaptive_integral_gaussian() {
        // int exp(-x^2/2) over [-8, 8] = sqrt(2 pi) up to negligible tail mass.
        let f = |p: &[f64]| (-0.5 * p[0] * p[0]).exp();
        let v = adaptive_box_integral(&f, &[-8.0], &[8.0], 32, 1e-10, 8).unwrap();
        assert_relative_eq!(v, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-9);
    }
}
