//! JSON run configuration with dotted-path overrides.
//!
//! ```json
//! {
//!   "data":  { "path": "data/ml-100k", "format": "movielens-100k", "core": 5 },
//!   "model": { "L": 50, "D": 96, "D_prime": 24, "L_prime": 12, "S": 3 },
//!   "train": { "max_epochs": 200, "batch_size": 256, "patience": 10,
//!              "optimizer": { "lr": 0.001 } },
//!   "eval":  { "k": 10 },
//!   "ablation": { "seeds": [1, 2, 3] },
//!   "seed": 42,
//!   "out": "run",
//!   "tag": "ml100k"
//! }
//! ```
//!
//! Every key is optional; unknown keys are rejected. `model.fields` is
//! filled in from the dataset vocabulary and normally left out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetFormat;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw file or directory, or the canonical TSV written by `prep`.
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Minimum interactions per user and per item.
    pub core: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data/ml-100k"),
            format: DatasetFormat::Movielens100k,
            core: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// When set, `eval` also reports ranks against this many sampled negatives.
    pub sampled_negatives: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            sampled_negatives: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub seed: u64,
    /// Parent directory of per-run output folders.
    pub out: PathBuf,
    /// Suffix of the run folder name.
    pub tag: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            seed: 42,
            out: PathBuf::from("run"),
            tag: "run".into(),
        }
    }
}

/// Sets `path` (dot-separated keys) in a JSON object tree, creating
/// intermediate objects. `raw` is parsed as JSON when possible and taken as
/// a string otherwise.
pub fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "override `{path}`: `{}` is not an object",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}

/// Splits `KEY=VALUE`.
pub fn parse_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))
}

impl RunConfig {
    /// Parses JSON text, applies overrides in order, and validates.
    pub fn from_json_with(text: &str, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut value: Value = match text.trim() {
            "" => Value::Object(Default::default()),
            t => serde_json::from_str(t).map_err(|e| Error::Config(format!("config JSON: {e}")))?,
        };
        for (k, v) in overrides {
            set_path(&mut value, k, v)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (defaults only when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(&str, &str)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_json_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate_hyper()
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("model: {m}")),
                other => other,
            })?;
        if !self.model.fields.is_empty() {
            self.model.validate()?;
        }
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        if self.data.core == 0 {
            return Err(Error::Config("data.core must be positive".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default materialized.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::from_json_with("", &[("model.D", "64"), ("train.optimizer.lr", "0.01"), ("tag", "x")]).unwrap();
        assert_eq!(c.model.width, 64);
        assert_eq!(c.train.optimizer.lr, 0.01);
        assert_eq!(c.tag, "x");
        assert_eq!(c.train.batch_size, 256);
        let back = RunConfig::from_json_with(&c.to_json(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rank_not_below_width_is_rejected() {
        let err = RunConfig::from_json_with("{}", &[("model.D_prime", "64"), ("model.D", "64")]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("D_prime")), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json_with(r#"{"model": {"depth": 3}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
        let err = RunConfig::from_json_with("{}", &[("train.lr", "0.1")]).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        assert!(RunConfig::from_json_with("{}", &[("seed.x", "1")]).is_err());
    }
}
