//! The single JSON run configuration. Sections: `data`, `partition`,
//! `model`, `train`, `ablation`, `analyze`; every field has a default so an
//! empty object is a valid config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::Projection;
use crate::backbone::NetworkConfig;
use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::partition::PartitionConfig;
use crate::trainer::{AblationConfig, PredictMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub kde_points: usize,
    /// Voxels sampled per volume for the density estimate.
    pub kde_samples_per_volume: usize,
    pub profile_axis: usize,
    pub projection: Projection,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            kde_points: 200,
            kde_samples_per_volume: 4096,
            profile_axis: 2,
            projection: Projection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: PredictMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mode: PredictMode::Main }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub model: NetworkConfig,
    /// `train.ablation` is ignored; the top-level `ablation` wins.
    pub train: TrainConfig,
    /// One of `exp1` .. `exp5`.
    pub ablation: String,
    pub evaluate: EvalConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            model: NetworkConfig::default(),
            train: TrainConfig::default(),
            ablation: "exp5".into(),
            evaluate: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl Config {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Config = serde_json::from_value(v).map_err(|e| Error::json("<config>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies `key.path=value`
    /// overrides, where `value` is parsed as JSON and falls back to a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_slice(&bytes).map_err(|e| Error::json(p, e))?
            }
            None => serde_json::to_value(Config::default()).expect("default config serialises"),
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Config::from_value(v)
    }

    pub fn ablation_config(&self) -> Result<AblationConfig> {
        AblationConfig::from_name(&self.ablation)
    }

    /// Training config with the top-level ablation applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.ablation = self.ablation_config()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation_config()?;
        self.model.validate()?;
        self.train_config()?.validate()?;
        if self.analyze.profile_axis > 2 {
            return Err(Error::InvalidArgument("analyze.profile_axis must be 0, 1 or 2".into()));
        }
        for s in &self.data.sources {
            s.spec.validate()?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        crate::volume::write_atomic(path, &bytes)
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::InvalidArgument(format!("empty key segment in `{key}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("`{key}` does not address an object field")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}
