//! Ground-truth validation: histogram densities on grids, total-variation
//! distance against analytic invariant densities, and infinite-sample
//! extrapolation of the TV error.

use thiserror::Error;

use crate::estimators::OmegaBox;
use crate::model::{SdeModel, State};
use crate::numeric::{self, NumericError};

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("no samples supplied")]
    EmptySample,
    #[error("grids are not defined on the same box and resolution")]
    GridMismatch,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Histogram of sample mass on an axis-aligned grid. Mass falling outside
/// the box is tracked separately so total mass is conserved.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub box_: OmegaBox,
    pub resolution: Vec<usize>,
    /// Row-major cell masses (fractions of the sample count).
    pub masses: Vec<f64>,
    pub out_mass: f64,
    pub n_samples: usize,
}

impl DensityGrid {
    pub fn n_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.out_mass
    }

    /// Center of the cell with row-major index `flat`.
    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        cell_center(&self.box_, &self.resolution, flat)
    }

    /// Total mass of cells whose center satisfies the predicate.
    pub fn mass_where(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(i, _)| pred(&self.cell_center(*i)))
            .map(|(_, m)| m)
            .sum()
    }
}

fn cell_center(box_: &OmegaBox, resolution: &[usize], flat: usize) -> Vec<f64> {
    let dim = box_.dim();
    let mut center = vec![0.0; dim];
    let mut rem = flat;
    for k in (0..dim).rev() {
        let idx = rem % resolution[k];
        rem /= resolution[k];
        let w = (box_.upper()[k] - box_.lower()[k]) / resolution[k] as f64;
        center[k] = box_.lower()[k] + (idx as f64 + 0.5) * w;
    }
    center
}

/// Streaming histogram accumulator; shards can be merged deterministically.
#[derive(Debug, Clone)]
pub struct GridAccumulator {
    box_: OmegaBox,
    resolution: Vec<usize>,
    inv_width: Vec<f64>,
    counts: Vec<u64>,
    out: u64,
}

impl GridAccumulator {
    pub fn new(box_: OmegaBox, resolution: Vec<usize>) -> Result<Self, ValidateError> {
        if resolution.len() != box_.dim() || resolution.iter().any(|&r| r == 0) {
            return Err(ValidateError::Invalid("resolution must be positive per axis".into()));
        }
        let inv_width = box_
            .lower()
            .iter()
            .zip(box_.upper())
            .zip(&resolution)
            .map(|((lo, hi), &r)| r as f64 / (hi - lo))
            .collect();
        let n_cells = resolution.iter().product();
        Ok(GridAccumulator { box_, resolution, inv_width, counts: vec![0; n_cells], out: 0 })
    }

    #[inline]
    pub fn update(&mut self, x: &[f64]) {
        let mut flat = 0usize;
        for k in 0..self.resolution.len() {
            let rel = (x[k] - self.box_.lower()[k]) * self.inv_width[k];
            if rel < 0.0 || !rel.is_finite() {
                self.out += 1;
                return;
            }
            let idx = rel as usize;
            if idx >= self.resolution[k] {
                // the right edge belongs to the last cell
                if x[k] <= self.box_.upper()[k] {
                    flat = flat * self.resolution[k] + (self.resolution[k] - 1);
                    continue;
                }
                self.out += 1;
                return;
            }
            flat = flat * self.resolution[k] + idx;
        }
        self.counts[flat] += 1;
    }

    pub fn merge(&mut self, other: &GridAccumulator) {
        assert_eq!(self.counts.len(), other.counts.len(), "incompatible accumulators");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.out += other.out;
    }

    pub fn n_samples(&self) -> usize {
        (self.counts.iter().sum::<u64>() + self.out) as usize
    }

    pub fn finish(&self) -> Result<DensityGrid, ValidateError> {
        let n = self.n_samples();
        if n == 0 {
            return Err(ValidateError::EmptySample);
        }
        let nf = n as f64;
        Ok(DensityGrid {
            box_: self.box_.clone(),
            resolution: self.resolution.clone(),
            masses: self.counts.iter().map(|&c| c as f64 / nf).collect(),
            out_mass: self.out as f64 / nf,
            n_samples: n,
        })
    }
}

/// Histogram of explicit samples.
pub fn empirical_density_grid(
    samples: &[State],
    box_: &OmegaBox,
    resolution: &[usize],
) -> Result<DensityGrid, ValidateError> {
    if samples.is_empty() {
        return Err(ValidateError::EmptySample);
    }
    let mut acc = GridAccumulator::new(box_.clone(), resolution.to_vec())?;
    for s in samples {
        acc.update(s.as_slice());
    }
    acc.finish()
}

/// Quadrature settings for normalizing analytic densities.
#[derive(Debug, Clone, Copy)]
pub struct NormalizerSettings {
    /// The normalizer integrates over the grid box inflated by this factor
    /// per side, capturing essentially all of the density's mass.
    pub inflate: f64,
    pub base_resolution: usize,
    pub rel_tol: f64,
    pub max_refinements: usize,
}

impl Default for NormalizerSettings {
    fn default() -> Self {
        NormalizerSettings { inflate: 0.5, base_resolution: 32, rel_tol: 1e-9, max_refinements: 8 }
    }
}

/// Per-cell masses of a normalized analytic density on the same grid as an
/// empirical histogram: midpoint rule per cell at the grid resolution, the
/// normalizer from adaptive quadrature on the inflated box.
#[derive(Debug, Clone)]
pub struct AnalyticGridMasses {
    pub masses: Vec<f64>,
    pub out_mass: f64,
    pub normalizer: f64,
}

impl AnalyticGridMasses {
    pub fn mass_where(
        &self,
        box_: &OmegaBox,
        resolution: &[usize],
        pred: impl Fn(&[f64]) -> bool,
    ) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(i, _)| pred(&cell_center(box_, resolution, *i)))
            .map(|(_, m)| m)
            .sum()
    }
}

pub fn analytic_grid_masses(
    log_density: &dyn Fn(&[f64]) -> f64,
    box_: &OmegaBox,
    resolution: &[usize],
    settings: &NormalizerSettings,
) -> Result<AnalyticGridMasses, ValidateError> {
    if resolution.len() != box_.dim() || resolution.iter().any(|&r| r == 0) {
        return Err(ValidateError::Invalid("resolution must be positive per axis".into()));
    }
    let quad_box = box_.inflate(settings.inflate);
    let density = |p: &[f64]| log_density(p).exp();
    let normalizer = numeric::adaptive_box_integral(
        &density,
        quad_box.lower(),
        quad_box.upper(),
        settings.base_resolution,
        settings.rel_tol,
        settings.max_refinements,
    )?;
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(ValidateError::Invalid(format!("normalizer {normalizer} is not positive")));
    }
    let n_cells: usize = resolution.iter().product();
    let cell_vol: f64 = box_
        .widths()
        .iter()
        .zip(resolution)
        .map(|(w, &r)| w / r as f64)
        .product();
    let mut masses = Vec::with_capacity(n_cells);
    let mut in_box = 0.0;
    for flat in 0..n_cells {
        let center = cell_center(box_, resolution, flat);
        let m = density(&center) * cell_vol / normalizer;
        in_box += m;
        masses.push(m);
    }
    Ok(AnalyticGridMasses { masses, out_mass: (1.0 - in_box).max(0.0), normalizer })
}

/// Total variation distance between an empirical histogram and a normalized
/// analytic density on the same grid: half the L1 gap over cells plus half
/// the combined out-of-box mass (which upper-bounds the outside
/// disagreement).
pub fn tv_distance(
    grid: &DensityGrid,
    log_density: &dyn Fn(&[f64]) -> f64,
    settings: &NormalizerSettings,
) -> Result<f64, ValidateError> {
    let analytic = analytic_grid_masses(log_density, &grid.box_, &grid.resolution, settings)?;
    Ok(tv_against_masses(grid, &analytic))
}

pub fn tv_against_masses(grid: &DensityGrid, analytic: &AnalyticGridMasses) -> f64 {
    let mut acc = 0.0;
    for (e, a) in grid.masses.iter().zip(&analytic.masses) {
        acc += (e - a).abs();
    }
    0.5 * acc + 0.5 * (grid.out_mass + analytic.out_mass)
}

/// Convenience: TV of a histogram against a model's analytic density.
pub fn tv_distance_to_model(
    grid: &DensityGrid,
    model: &SdeModel,
    settings: &NormalizerSettings,
) -> Result<f64, ValidateError> {
    if !model.has_analytic_density() {
        return Err(ValidateError::Invalid(format!(
            "model `{}` has no analytic invariant density",
            model.name()
        )));
    }
    let m = model.clone();
    tv_distance(grid, &move |p: &[f64]| {
        m.analytic_log_density(&State::from_column_slice(p)).expect("dimension checked")
    }, settings)
}

/// Exact total variation on the common grid partition of two histograms.
pub fn tv_between_grids(a: &DensityGrid, b: &DensityGrid) -> Result<f64, ValidateError> {
    if a.box_ != b.box_ || a.resolution != b.resolution {
        return Err(ValidateError::GridMismatch);
    }
    let cells: f64 = a.masses.iter().zip(&b.masses).map(|(x, y)| (x - y).abs()).sum();
    Ok(0.5 * cells + 0.5 * (a.out_mass - b.out_mass).abs())
}

/// Intercept of the least-squares line `tv = a + b n^{-1/2}` through
/// `(sample_size, tv)` points: the infinite-sample extrapolation of the
/// total variation error.
pub fn infinite_sample_extrapolation(points: &[(f64, f64)]) -> Result<f64, ValidateError> {
    if points.len() < 2 {
        return Err(ValidateError::Invalid("need at least two (size, tv) points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.powf(-0.5)).collect();
    let ys: Vec<f64> = points.iter().map(|(_, tv)| *tv).collect();
    let (intercept, _) = numeric::linear_fit(&xs, &ys)?;
    Ok(intercept)
}
