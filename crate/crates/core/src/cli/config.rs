//! TOML run configuration with strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::ModelParams;
use crate::stress::check_exponents;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    /// Base flow step.
    pub dt: f64,
    /// Age step `Δs = age_step_factor · dt`.
    #[serde(default = "one_usize")]
    pub age_step_factor: usize,
    pub t_final: f64,
    #[serde(default = "default_safety")]
    pub cfl_safety: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSection {
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(flatten)]
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default = "default_eps")]
    pub eps_tail: f64,
    #[serde(default = "default_cap")]
    pub max_age_nodes: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            eps_tail: default_eps(),
            max_age_nodes: default_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesSection {
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default = "default_tol")]
    pub det_tol: f64,
}

impl Default for EstimatesSection {
    fn default() -> Self {
        Self {
            q: default_q(),
            r: default_r(),
            mu: 1.0,
            det_tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocityInit {
    TaylorGreen,
    RandomBandLimited,
    FromSnapshot,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryInit {
    Identity,
    ModulatedIdentity,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default = "default_velocity")]
    pub velocity: VelocityInit,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_band")]
    pub band: usize,
    #[serde(default)]
    pub velocity_snapshot: Option<PathBuf>,
    #[serde(default = "default_history")]
    pub history: HistoryInit,
    /// `G₀ = (1 + a sin x1) δ` for the modulated history.
    #[serde(default = "default_modulation")]
    pub modulation: f64,
    #[serde(default)]
    pub history_snapshot: Option<PathBuf>,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            velocity: default_velocity(),
            amplitude: 1.0,
            seed: 0,
            band: default_band(),
            velocity_snapshot: None,
            history: default_history(),
            modulation: default_modulation(),
            history_snapshot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "one_usize")]
    pub log_every: usize,
    /// 0 disables periodic snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub snapshot_slices: Vec<usize>,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "yes")]
    pub final_checkpoint: bool,
    #[serde(default)]
    pub fatal_on_violation: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            log_every: 1,
            snapshot_every: 0,
            snapshot_slices: Vec::new(),
            checkpoint_every: 0,
            final_checkpoint: true,
            fatal_on_violation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default)]
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub grid: GridSection,
    pub time: TimeSection,
    pub fluid: FluidSection,
    pub model: ModelSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub estimates: EstimatesSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_safety() -> f64 {
    0.5
}
fn default_eps() -> f64 {
    1e-6
}
fn default_cap() -> usize {
    200_000
}
fn default_q() -> f64 {
    8.0
}
fn default_r() -> f64 {
    4.0
}
fn default_tol() -> f64 {
    1e-2
}
fn default_velocity() -> VelocityInit {
    VelocityInit::TaylorGreen
}
fn default_history() -> HistoryInit {
    HistoryInit::Identity
}
fn default_band() -> usize {
    4
}
fn default_modulation() -> f64 {
    0.5
}
fn default_dir() -> PathBuf {
    PathBuf::from("memflow-out")
}

impl SimulationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Age step `Δs`.
    pub fn age_step(&self) -> f64 {
        self.time.dt * self.time.age_step_factor as f64
    }

    /// Number of age steps to reach `t_final`.
    pub fn steps(&self) -> usize {
        (self.time.t_final / self.age_step()).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.grid.n;
        if n < 16 || !n.is_power_of_two() {
            return Err(invalid("grid.n", format!("must be a power of two ≥ 16, got {n}")));
        }
        if !(self.fluid.eta > 0.0 && self.fluid.eta.is_finite()) {
            return Err(invalid("fluid.eta", format!("must be positive, got {}", self.fluid.eta)));
        }
        if !(self.time.dt > 0.0 && self.time.dt.is_finite()) {
            return Err(invalid("time.dt", format!("must be positive, got {}", self.time.dt)));
        }
        if self.time.age_step_factor == 0 {
            return Err(invalid("time.age_step_factor", "must be at least 1"));
        }
        if !(self.time.t_final >= 0.0 && self.time.t_final.is_finite()) {
            return Err(invalid("time.t_final", "must be finite and nonnegative"));
        }
        let ds = self.age_step();
        let steps = (self.time.t_final / ds).round();
        if (steps * ds - self.time.t_final).abs() > 1e-9 * self.time.t_final.max(1.0) {
            return Err(invalid(
                "time.t_final",
                format!("must be a whole number of age steps Δs = {ds}"),
            ));
        }
        if !(self.time.cfl_safety > 0.0 && self.time.cfl_safety <= 1.0) {
            return Err(invalid("time.cfl_safety", "must lie in (0, 1]"));
        }
        if check_exponents(self.estimates.q, self.estimates.r).is_err() {
            return Err(invalid(
                "estimates.q",
                format!(
                    "q = {}, r = {} violate 1/q + 1/r < 1/2",
                    self.estimates.q, self.estimates.r
                ),
            ));
        }
        if !(self.estimates.mu > 0.0) {
            return Err(invalid("estimates.mu", "must be positive"));
        }
        if !(self.memory.eps_tail > 0.0 && self.memory.eps_tail < 1.0) {
            return Err(invalid("memory.eps_tail", "must lie in (0, 1)"));
        }
        if self.output.log_every == 0 {
            return Err(invalid("output.log_every", "must be at least 1"));
        }
        if self.initial.velocity == VelocityInit::FromSnapshot && self.initial.velocity_snapshot.is_none() {
            return Err(invalid("initial.velocity_snapshot", "required for from-snapshot"));
        }
        if self.initial.history == HistoryInit::Snapshot && self.initial.history_snapshot.is_none() {
            return Err(invalid("initial.history_snapshot", "required for snapshot history"));
        }
        if self.initial.history == HistoryInit::ModulatedIdentity && !(self.initial.modulation.abs() < 1.0) {
            return Err(invalid("initial.modulation", "must satisfy |a| < 1"));
        }
        if self.oracle.enabled && self.model.name != "oldroyd-b" {
            return Err(invalid("oracle.enabled", "the differential oracle exists only for oldroyd-b"));
        }
        let (kernel, _) = crate::constitutive::model_catalog(&self.model.name, &self.model.params)
            .map_err(|e| invalid("model", e.to_string()))?;
        crate::age::build_age_grid(&kernel, ds, self.memory.eps_tail, self.memory.max_age_nodes)
            .map_err(|e| invalid("memory.max_age_nodes", e.to_string()))?;
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<SimulationConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    SimulationConfig::from_toml_str(&text)
}
