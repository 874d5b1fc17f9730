//! Run configuration: TOML schema, catalog-backed resolution, validation.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sdequal::coupling::{CouplingPolicy, PolicyKind};
use sdequal::estimators::{CappedDistance, OmegaBox};
use sdequal::integrate::steps_for_horizon;
use sdequal::model::{self, RunDefaults, SdeModel};
use sdequal::Scheme;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub coupling: CouplingSection,
    #[serde(default)]
    pub distance: DistanceSection,
    #[serde(default)]
    pub domain: DomainSection,
    #[serde(default)]
    pub algorithm1: Algorithm1Section,
    #[serde(default)]
    pub algorithm2: Algorithm2Section,
    #[serde(default)]
    pub tail: TailSection,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchemeSection {
    #[serde(default)]
    pub kind: SchemeKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    #[default]
    EulerMaruyama,
    Milstein,
}

impl From<SchemeKind> for Scheme {
    fn from(k: SchemeKind) -> Scheme {
        match k {
            SchemeKind::EulerMaruyama => Scheme::EulerMaruyama,
            SchemeKind::Milstein => Scheme::Milstein,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimeSection {
    /// Step size; defaults to the catalog value for the model.
    pub h: Option<f64>,
    /// Contraction/extrapolation horizon T; defaults to the catalog value.
    pub t_horizon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingSection {
    /// Defaults to `langevin-mixed` for kinetic models, `mixed` otherwise.
    pub kind: Option<PolicyKind>,
    pub switch_threshold: Option<f64>,
    #[serde(default)]
    pub langevin: LangevinSection,
}

impl Default for CouplingSection {
    fn default() -> Self {
        CouplingSection { kind: None, switch_threshold: None, langevin: LangevinSection::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LangevinSection {
    pub q_switch: Option<f64>,
    pub window_multiplier: f64,
}

impl Default for LangevinSection {
    fn default() -> Self {
        LangevinSection { q_switch: None, window_multiplier: 2.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceSection {
    pub cap: f64,
    pub exponent: f64,
}

impl Default for DistanceSection {
    fn default() -> Self {
        DistanceSection { cap: 1.0, exponent: 1.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DomainSection {
    /// Explicit box; when absent, `certify`/`contraction` derive it from the
    /// states visited by the finite-time run, expanded by `margin`.
    pub omega_lower: Option<Vec<f64>>,
    pub omega_upper: Option<Vec<f64>>,
    /// Explicit tail-mass allowance; when absent, `1 / n_samples` of the
    /// finite-time run is used.
    pub epsilon: Option<f64>,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Algorithm1Section {
    pub n_samples: usize,
    pub n_chains: usize,
    pub burn_in: usize,
}

impl Default for Algorithm1Section {
    fn default() -> Self {
        Algorithm1Section { n_samples: 100_000, n_chains: 8, burn_in: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Algorithm2Section {
    pub n_pairs: usize,
    pub m_replicates: usize,
    pub exceedance_fraction: f64,
    pub min_exceedances: usize,
}

impl Default for Algorithm2Section {
    fn default() -> Self {
        Algorithm2Section {
            n_pairs: 2000,
            m_replicates: 200,
            exceedance_fraction: 0.05,
            min_exceedances: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailSection {
    /// Uniform initial pairs, one coupling run each.
    pub n_samples: usize,
    pub window: (f64, f64),
}

impl Default for TailSection {
    fn default() -> Self {
        TailSection { n_samples: 20_000, window: (0.01, 0.5) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidateSection {
    /// Histogram resolution per (projected) axis; empty means a model
    /// default (256 per axis, 512 for kinetic position marginals).
    #[serde(default)]
    pub resolution: Vec<usize>,
    /// Coordinates to histogram; empty means all coordinates.
    #[serde(default)]
    pub projection: Vec<usize>,
    pub n_chains: usize,
    /// Steps recorded per chain (one sample per step).
    pub steps_per_chain: usize,
    /// Number of geometric sample sizes (factor 2) for the infinite-sample
    /// extrapolation of the TV distance.
    pub n_sizes: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            resolution: Vec::new(),
            projection: Vec::new(),
            n_chains: 8,
            steps_per_chain: 2_000_000,
            n_sizes: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    /// 0 means the scheduler default (or `SDEQUAL_WORKERS`).
    #[serde(skip_serializing, default)]
    pub workers: usize,
    #[serde(skip_serializing, default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, workers: 0, out_dir: default_out_dir() }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).context("parsing config")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Instantiates the model and fills every defaulted field, leaving a
    /// fully concrete configuration whose serialization is what gets hashed
    /// into the summary.
    pub fn resolve(mut self) -> Result<ResolvedRun> {
        let (model, defaults): (SdeModel, RunDefaults) =
            model::instantiate(&self.model.name, &self.model.params)
                .with_context(|| format!("instantiating model `{}`", self.model.name))?;
        self.model.params = model.params().clone();
        let h = *self.time.h.get_or_insert(defaults.h);
        let t_horizon = *self.time.t_horizon.get_or_insert(defaults.t_horizon);
        if !(h > 0.0) || !(t_horizon > 0.0) {
            bail!("h and t_horizon must be positive");
        }
        steps_for_horizon(t_horizon, 2.0 * h)
            .context("T must be a positive multiple of 2h")?;
        let default_kind = if model.langevin_structure().is_some() {
            PolicyKind::LangevinMixed
        } else {
            PolicyKind::Mixed
        };
        let kind = *self.coupling.kind.get_or_insert(default_kind);
        let policy = CouplingPolicy {
            kind,
            switch_threshold: self.coupling.switch_threshold,
            q_switch: self.coupling.langevin.q_switch,
            window_multiplier: self.coupling.langevin.window_multiplier,
        };
        policy.validate().map_err(|e| anyhow::anyhow!("coupling config: {e}"))?;
        if !(self.distance.cap > 0.0 && self.distance.exponent > 0.0) {
            bail!("distance cap and exponent must be positive");
        }
        let distance = CappedDistance::new(self.distance.cap, self.distance.exponent);
        let omega = match (&self.domain.omega_lower, &self.domain.omega_upper) {
            (Some(lo), Some(hi)) => {
                let b = OmegaBox::new(lo.clone(), hi.clone())
                    .map_err(|e| anyhow::anyhow!("domain: {e}"))?;
                if b.dim() != model.dim() {
                    bail!("omega bounds have dimension {}, model needs {}", b.dim(), model.dim());
                }
                Some(b)
            }
            (None, None) => None,
            _ => bail!("omega_lower and omega_upper must be given together"),
        };
        if let Some(eps) = self.domain.epsilon {
            if !(eps >= 0.0) {
                bail!("epsilon must be nonnegative");
            }
        }
        if self.algorithm1.n_samples == 0 || self.algorithm1.n_chains == 0 {
            bail!("algorithm1.n_samples and n_chains must be positive");
        }
        if self.algorithm2.n_pairs == 0 || self.algorithm2.m_replicates == 0 {
            bail!("algorithm2.n_pairs and m_replicates must be positive");
        }
        if !(self.algorithm2.exceedance_fraction > 0.0 && self.algorithm2.exceedance_fraction < 1.0)
        {
            bail!("algorithm2.exceedance_fraction must be in (0, 1)");
        }
        let (wlo, whi) = self.tail.window;
        if !(0.0 < wlo && wlo < whi && whi <= 1.0) {
            bail!("tail.window must satisfy 0 < lo < hi <= 1");
        }
        if self.validate.n_sizes == 0 || self.validate.n_chains == 0 {
            bail!("validate.n_sizes and n_chains must be positive");
        }
        // default catalog omega kept separately: contraction falls back to
        // it only when the run cannot derive a box itself
        Ok(ResolvedRun {
            scheme: self.scheme.kind.into(),
            model,
            catalog_defaults: defaults,
            policy,
            distance,
            omega,
            h,
            t_horizon,
            config: self,
        })
    }
}

/// A fully resolved run: concrete model, policy, distance, and config.
pub struct ResolvedRun {
    pub model: SdeModel,
    pub catalog_defaults: RunDefaults,
    pub scheme: Scheme,
    pub policy: CouplingPolicy,
    pub distance: CappedDistance,
    /// Explicit box from the config, if any.
    pub omega: Option<OmegaBox>,
    pub h: f64,
    pub t_horizon: f64,
    pub config: Config,
}

impl ResolvedRun {
    /// Stable hash of the resolved configuration (excluding execution-only
    /// fields such as worker count and output directory).
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical =
            serde_json::to_string(&self.config).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            write!(hex, "{b:02x}").unwrap();
        }
        hex
    }
}
