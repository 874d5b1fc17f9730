//! Result files: summary JSON plus plot-ready CSVs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use sdequal::estimators::{ContractionSample, SurvivalCurve};
use sdequal::evt::GpdDiagnosticRow;
use sdequal::validate::DensityGrid;

use crate::config::Config;

/// Machine-readable run summary. Field order is fixed, so identical runs
/// serialize byte-identically apart from the timestamp.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub command: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_finite_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_upper: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_exceedances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_points: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_extrapolated: Option<f64>,
    pub config: Config,
    pub timestamp_unix: u64,
}

impl Summary {
    pub fn new(command: &str, model: &str, seed: u64, config_hash: String, config: Config) -> Self {
        Summary {
            command: command.to_string(),
            model: model.to_string(),
            scale: None,
            seed,
            config_hash,
            e_finite_time: None,
            e_std_error: None,
            e_n_samples: None,
            epsilon: None,
            omega_lower: None,
            omega_upper: None,
            n_pairs: None,
            m_replicates: None,
            max_r: None,
            threshold_v: None,
            zeta: None,
            xi: None,
            n_exceedances: None,
            v_max: None,
            alpha: None,
            alpha_note: None,
            gamma: None,
            bound: None,
            bound_mode: None,
            tv_points: None,
            tv: None,
            tv_extrapolated: None,
            config,
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn write_pairs_csv(dir: &Path, samples: &[ContractionSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let f = fs::File::create(dir.join("pairs.csv"))?;
    let mut w = BufWriter::new(f);
    let dim = samples.first().map(|s| s.x.len()).unwrap_or(0);
    write!(w, "index,distance,replicates,coupled,diverged,r,v")?;
    for i in 0..dim {
        write!(w, ",x{i}")?;
    }
    for i in 0..dim {
        write!(w, ",y{i}")?;
    }
    writeln!(w)?;
    for (i, s) in samples.iter().enumerate() {
        write!(
            w,
            "{i},{},{},{},{},{},{}",
            s.distance, s.replicates, s.coupled_count, s.diverged_count, s.r, s.v
        )?;
        for v in &s.x {
            write!(w, ",{v}")?;
        }
        for v in &s.y {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_survival_csv(dir: &Path, curve: &SurvivalCurve) -> Result<()> {
    fs::create_dir_all(dir)?;
    let f = fs::File::create(dir.join("survival.csv"))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "t,survival")?;
    for (t, s) in curve.times.iter().zip(&curve.survival) {
        writeln!(w, "{t},{s}")?;
    }
    Ok(())
}

pub fn write_gpd_diagnostic_csv(dir: &Path, rows: &[GpdDiagnosticRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let f = fs::File::create(dir.join("gpd_diagnostic.csv"))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "exceedance,empirical_cdf,fitted_cdf")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.exceedance, r.empirical_cdf, r.fitted_cdf)?;
    }
    Ok(())
}

/// Cell centers and masses; for 2D grids this is the plot-ready
/// `(x_center, y_center, mass)` layout.
pub fn write_density_grid_csv(
    dir: &Path,
    grid: &DensityGrid,
    analytic: Option<&[f64]>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let f = fs::File::create(dir.join("density_grid.csv"))?;
    let mut w = BufWriter::new(f);
    let dim = grid.box_.dim();
    for k in 0..dim {
        write!(w, "c{k},")?;
    }
    if analytic.is_some() {
        writeln!(w, "mass,analytic_mass")?;
    } else {
        writeln!(w, "mass")?;
    }
    for (i, m) in grid.masses.iter().enumerate() {
        let center = grid.cell_center(i);
        for c in &center {
            write!(w, "{c},")?;
        }
        match analytic {
            Some(a) => writeln!(w, "{m},{}", a[i])?,
            None => writeln!(w, "{m}")?,
        }
    }
    Ok(())
}
