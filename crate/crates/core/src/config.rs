//! Run configuration.
//!
//! A run is described by one TOML file. Values resolve in this order, later
//! sources winning: built-in defaults, the config file, `--override
//! key=value` pairs (dotted paths, values in TOML syntax), then the dedicated
//! `--seed` and `--out` flags. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise_sim::SimulationParams;
use crate::toy_trainer::{FeatureParams, Head, Targets, TrainConfig};
use crate::uncertainty::{default_switch_iteration, UncertaintyConfig, UpperBoundSwitch};

pub const DEFAULT_OUTPUT_DIR: &str = "regionu-out";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub delta_b: f64,
    pub delta_f: f64,
    /// Upper bound used from `switch_iteration` on.
    pub delta_f_late: f64,
    pub late_switch: bool,
    /// Defaults to `2T/3` of the training run.
    pub switch_iteration: Option<u64>,
    pub sharpness: f64,
    pub schedule_exponent: f64,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        Self {
            delta_b: UncertaintyConfig::DEFAULT_DELTA_B,
            delta_f: UncertaintyConfig::DEFAULT_DELTA_F,
            delta_f_late: UncertaintyConfig::DEFAULT_LATE_DELTA_F,
            late_switch: true,
            switch_iteration: None,
            sharpness: UncertaintyConfig::DEFAULT_SHARPNESS,
            schedule_exponent: UncertaintyConfig::DEFAULT_SCHEDULE_EXPONENT,
        }
    }
}

impl UncertaintySection {
    pub fn resolve(&self, total_iterations: u64) -> UncertaintyConfig {
        UncertaintyConfig {
            delta_b: self.delta_b,
            delta_f: self.delta_f,
            sharpness: self.sharpness,
            schedule_exponent: self.schedule_exponent,
            total_iterations,
            late_delta_f: self.late_switch.then(|| UpperBoundSwitch {
                delta_f: self.delta_f_late,
                at_iteration: self
                    .switch_iteration
                    .unwrap_or_else(|| default_switch_iteration(total_iterations)),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub head: Head,
    pub targets: Targets,
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub regression_weight: f64,
    pub log_every: u64,
    pub heldout_fraction: f64,
    pub uncertainty_override: Option<f64>,
    pub features: FeatureParams,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            head: d.head,
            targets: d.targets,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            gamma: d.gamma,
            regression_weight: d.regression_weight,
            log_every: d.log_every,
            heldout_fraction: d.heldout_fraction,
            uncertainty_override: d.uncertainty_override,
            features: d.features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub iou_bins: usize,
    pub u_bins: usize,
    /// Early, middle and late stages as fractions of the training run.
    pub stages: [f64; 3],
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            iou_bins: 10,
            u_bins: 20,
            stages: [0.05, 0.5, 0.95],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub seeds: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub simulation: SimulationParams,
    #[serde(default)]
    pub uncertainty: UncertaintySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub compare: CompareSection,
}

/// Command-line sources layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub pairs: Vec<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Parses the right-hand side of `key=value` as a TOML value. Bare words that
/// are not valid TOML are taken as strings, so `train.head=sigmoid-focal`
/// works without quoting.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for (depth, part) in parents.iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            invalid(format!(
                "override `{key}`: `{}` is not a table",
                parts[..=depth].join(".")
            ))
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Resolves a configuration from an optional file plus command-line
    /// overrides. A file must set `seed`; without a file the seed defaults
    /// to 0.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => {
                let mut t = toml::Table::new();
                t.insert("seed".into(), toml::Value::Integer(0));
                t
            }
        };
        Self::layer(&mut table, overrides)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
            let origin = path.map_or("config".to_string(), |p| p.display().to_string());
            invalid(format!("{origin}: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a complete TOML document (defaults fill omitted sections).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn layer(table: &mut toml::Table, overrides: &Overrides) -> Result<()> {
        for pair in &overrides.pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{pair}` is not key=value")))?;
            set_path(table, key.trim(), parse_value(value.trim()))?;
        }
        if let Some(seed) = overrides.seed {
            let seed = i64::try_from(seed)
                .map_err(|_| invalid(format!("seed {seed} does not fit a TOML integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        if let Some(out) = &overrides.output_dir {
            table.insert(
                "output_dir".into(),
                toml::Value::String(out.to_string_lossy().into_owned()),
            );
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| invalid(format!("[{section}] {e}"));
        self.simulation
            .validate()
            .map_err(|e| ctx("simulation", e))?;
        self.train_config()
            .validate()
            .map_err(|e| ctx("train/uncertainty", e))?;
        if self.analysis.iou_bins < 2 || self.analysis.u_bins < 2 {
            return Err(invalid("[analysis] iou_bins and u_bins must be at least 2"));
        }
        if !self.analysis.stages.iter().all(|s| (0.0..=1.0).contains(s)) {
            return Err(invalid("[analysis] stages must lie in [0, 1]"));
        }
        if self.compare.seeds == 0 {
            return Err(invalid("[compare] seeds must be at least 1"));
        }
        Ok(())
    }

    pub fn uncertainty_config(&self) -> UncertaintyConfig {
        self.uncertainty.resolve(self.train.iterations)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            head: t.head,
            targets: t.targets,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: self.seed,
            gamma: t.gamma,
            regression_weight: t.regression_weight,
            log_every: t.log_every,
            heldout_fraction: t.heldout_fraction,
            features: t.features,
            uncertainty: self.uncertainty_config(),
            uncertainty_override: t.uncertainty_override,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// SHA-256 of the resolved configuration, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&RunConfig {
            output_dir: None,
            ..self.clone()
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}
