//! Run configuration: a TOML file with sections, plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::observation::MaskStrategy;
use crate::prior::denoiser::TrainConfig;
use crate::sampler::SamplerConfig;
use crate::scene_sim::{DatasetConfig, SimParams};
use crate::schedule::{default_betas, make_ddm_schedule, make_ddpm_schedule, NoiseSchedule, ScheduleKind};

/// Environment variable supplying the base seed when the config omits one.
pub const SEED_ENV: &str = "DMI_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_train")]
    pub n_train: usize,
    #[serde(default = "d_test")]
    pub n_test: usize,
    #[serde(default = "d_min_b")]
    pub min_buildings: usize,
    #[serde(default = "d_max_b")]
    pub max_buildings: usize,
    #[serde(default)]
    pub sim: SimParams,
}

fn d_side() -> usize {
    64
}
fn d_train() -> usize {
    200
}
fn d_test() -> usize {
    20
}
fn d_min_b() -> usize {
    4
}
fn d_max_b() -> usize {
    12
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: None,
            width: d_side(),
            height: d_side(),
            n_train: d_train(),
            n_test: d_test(),
            min_buildings: d_min_b(),
            max_buildings: d_max_b(),
            sim: SimParams::default(),
        }
    }
}

impl DatasetSection {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            width: self.width,
            height: self.height,
            n_train: self.n_train,
            n_test: self.n_test,
            min_buildings: self.min_buildings,
            max_buildings: self.max_buildings,
            params: self.sim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "d_kind")]
    pub kind: ScheduleKind,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub beta_min: Option<f64>,
    #[serde(default)]
    pub beta_max: Option<f64>,
}

fn d_kind() -> ScheduleKind {
    ScheduleKind::Ddpm
}
fn d_steps() -> usize {
    200
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: d_kind(),
            steps: d_steps(),
            beta_min: None,
            beta_max: None,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Ddpm => {
                let (lo, hi) = default_betas(self.steps);
                make_ddpm_schedule(self.steps, self.beta_min.unwrap_or(lo), self.beta_max.unwrap_or(hi))
            }
            ScheduleKind::Ddm => make_ddm_schedule(self.steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorVariant {
    Learned,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "d_variant")]
    pub variant: PriorVariant,
    /// Model file; defaults to `model.dmw` in the output directory.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Variance floor for the fitted Gaussian prior.
    #[serde(default = "d_var_floor")]
    pub var_floor: f64,
}

fn d_variant() -> PriorVariant {
    PriorVariant::Learned
}
fn d_var_floor() -> f64 {
    1e-4
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            variant: d_variant(),
            model: None,
            var_floor: d_var_floor(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Diffusion,
    Idw,
    Kriging,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Diffusion => "diffusion",
            Method::Idw => "idw",
            Method::Kriging => "kriging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d_rates")]
    pub mask_rates: Vec<f64>,
    #[serde(default = "d_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "d_aware")]
    pub aware: Vec<bool>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_strategy")]
    pub strategy: MaskStrategy,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    /// Number of test maps to use; all when absent.
    #[serde(default)]
    pub maps: Option<usize>,
    /// Noise std given to building cells in scenario-aware runs.
    #[serde(default = "d_aware_sigma")]
    pub aware_sigma: f64,
    #[serde(default = "d_power")]
    pub idw_power: f64,
    #[serde(default = "d_neighbors")]
    pub kriging_neighbors: usize,
    #[serde(default = "d_bins")]
    pub variogram_bins: usize,
    #[serde(default = "d_true")]
    pub save_grids: bool,
    /// Write measured wall time; when off the column is zero and rows are reproducible byte for byte.
    #[serde(default = "d_true")]
    pub record_wall_time: bool,
}

fn d_rates() -> Vec<f64> {
    vec![0.7, 0.8, 0.9]
}
fn d_sigmas() -> Vec<f64> {
    vec![0.01, 0.05, 0.09]
}
fn d_aware() -> Vec<bool> {
    vec![true, false]
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn d_strategy() -> MaskStrategy {
    MaskStrategy::RandomPixel
}
fn d_methods() -> Vec<Method> {
    vec![Method::Diffusion, Method::Idw, Method::Kriging]
}
fn d_aware_sigma() -> f64 {
    0.01
}
fn d_power() -> f64 {
    2.0
}
fn d_neighbors() -> usize {
    16
}
fn d_bins() -> usize {
    15
}
fn d_true() -> bool {
    true
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mask_rates: d_rates(),
            sigmas: d_sigmas(),
            aware: d_aware(),
            seeds: d_seeds(),
            strategy: d_strategy(),
            methods: d_methods(),
            maps: None,
            aware_sigma: d_aware_sigma(),
            idw_power: d_power(),
            kriging_neighbors: d_neighbors(),
            variogram_bins: d_bins(),
            save_grids: true,
            record_wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; falls back to `DMI_SEED`, then 0.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub output: OutputSection,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if !table.contains_key("output") {
            return Err(config_err("missing required key `output.dir`"));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn dataset_dir(&self) -> &Path {
        self.dataset.dir.as_deref().expect("validated")
    }

    pub fn output_dir(&self) -> &Path {
        self.output.dir.as_deref().expect("validated")
    }

    pub fn model_path(&self) -> PathBuf {
        self.prior.model.clone().unwrap_or_else(|| self.output_dir().join("model.dmw"))
    }

    /// The configured seed, else `DMI_SEED`, else 0.
    pub fn base_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.dir.is_none() {
            return Err(config_err("missing required key `dataset.dir`"));
        }
        if self.output.dir.is_none() {
            return Err(config_err("missing required key `output.dir`"));
        }
        let d = &self.dataset;
        if d.width < 8 || d.height < 8 {
            return Err(config_err("`dataset.width` and `dataset.height` must be at least 8"));
        }
        if d.min_buildings > d.max_buildings {
            return Err(config_err("`dataset.min_buildings` must not exceed `dataset.max_buildings`"));
        }
        d.sim.validate().map_err(|e| config_err(format!("`dataset.sim`: {e}")))?;
        self.schedule.build().map_err(|e| config_err(format!("`schedule`: {e}")))?;
        if self.prior.variant == PriorVariant::Learned && self.schedule.kind != ScheduleKind::Ddpm {
            return Err(config_err("`schedule.kind` must be ddpm for the learned prior"));
        }
        if !(self.prior.var_floor > 0.0) {
            return Err(config_err("`prior.var_floor` must be positive"));
        }
        self.train.validate().map_err(|e| config_err(format!("`train`: {e}")))?;
        self.sampler.validate().map_err(|e| config_err(format!("`sampler`: {e}")))?;
        self.metrics.validate().map_err(|e| config_err(format!("`metrics`: {e}")))?;
        let s = &self.sweep;
        if s.mask_rates.is_empty() || s.mask_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(config_err("`sweep.mask_rates` must be a nonempty list in [0, 1)"));
        }
        if s.sigmas.is_empty() || s.sigmas.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(config_err("`sweep.sigmas` must be a nonempty list of values >= 0"));
        }
        if s.aware.is_empty() || s.seeds.is_empty() || s.methods.is_empty() {
            return Err(config_err("`sweep.aware`, `sweep.seeds` and `sweep.methods` must be nonempty"));
        }
        if !(s.aware_sigma > 0.0) {
            return Err(config_err("`sweep.aware_sigma` must be positive"));
        }
        if !(s.idw_power > 0.0) {
            return Err(config_err("`sweep.idw_power` must be positive"));
        }
        if s.kriging_neighbors < 2 || s.variogram_bins < 2 {
            return Err(config_err("`sweep.kriging_neighbors` and `sweep.variogram_bins` must be at least 2"));
        }
        if s.maps == Some(0) || s.maps.is_some_and(|m| m > d.n_test) {
            return Err(config_err("`sweep.maps` must lie in 1..=dataset.n_test"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[dataset]\ndir = \"data\"\n[output]\ndir = \"out\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse(BASE, &[]).unwrap();
        assert_eq!(c.dataset_dir(), Path::new("data"));
        assert_eq!(c.model_path(), Path::new("out/model.dmw"));
        assert_eq!(c.schedule.steps, 200);
        assert_eq!(c.sampler.m, 10);
        assert_eq!(c.sweep.mask_rates, vec![0.7, 0.8, 0.9]);
    }

    #[test]
    fn missing_required_keys_are_named() {
        let e = RunConfig::parse("[output]\ndir = \"o\"\n", &[]).unwrap_err().to_string();
        assert!(e.contains("dataset.dir"), "{e}");
        let e = RunConfig::parse("[dataset]\ndir = \"d\"\n", &[]).unwrap_err().to_string();
        assert!(e.contains("output.dir"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::parse(&format!("{BASE}[sampler]\nmm = 3\n"), &[]).unwrap_err().to_string();
        assert!(e.contains("mm"), "{e}");
        assert!(RunConfig::parse(&format!("bogus = 1\n{BASE}"), &[]).is_err());
    }

    #[test]
    fn overrides_win() {
        let text = format!("seed = 3\n{BASE}[sampler]\nm = 4\n");
        let c = RunConfig::parse(&text, &["sampler.m=12".into(), "sweep.sigmas=[0.02]".into(), "output.dir=elsewhere".into()]).unwrap();
        assert_eq!(c.sampler.m, 12);
        assert_eq!(c.sweep.sigmas, vec![0.02]);
        assert_eq!(c.output_dir(), Path::new("elsewhere"));
        assert_eq!(c.base_seed().unwrap(), 3);
        assert!(RunConfig::parse(BASE, &["sampler.m".into()]).is_err());
        assert!(RunConfig::parse(BASE, &["sampler.m=0".into()]).is_err());
    }

    #[test]
    fn constraint_errors_name_the_key() {
        let e = RunConfig::parse(BASE, &["sweep.mask_rates=[1.2]".into()]).unwrap_err().to_string();
        assert!(e.contains("sweep.mask_rates"), "{e}");
        let e = RunConfig::parse(BASE, &["schedule.kind=\"ddm\"".into()]).unwrap_err().to_string();
        assert!(e.contains("schedule.kind"), "{e}");
        assert!(RunConfig::parse(BASE, &["schedule.kind=\"ddm\"".into(), "prior.variant=\"gaussian\"".into()]).is_ok());
    }

    #[test]
    fn roundtrip() {
        let text = format!("{BASE}[sweep]\nmaps = 2\nmethods = [\"idw\"]\n[schedule]\nbeta_max = 0.05\n");
        let c = RunConfig::parse(&text, &["seed=9".into()]).unwrap();
        let dumped = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&dumped, &[]).unwrap(), c);
    }
}
