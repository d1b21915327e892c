//! Experiment configuration as flat `section.key` JSON.
//!
//! ```json
//! { "model.latent_dim": 32, "train.epochs": 10, "train.weights.rec": 1.0,
//!   "fusion.p": "inf", "data.train": "idx:train-images:train-labels" }
//! ```
//!
//! Nested objects are accepted as well and flattened before validation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ood::FusionConfig;
use crate::trainer::TrainConfig;

/// Where the experiment's images come from.
///
/// A source is either a manifest file (`.csv` or `.json`) or an IDX pair
/// written `idx:<images>:<labels>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<String>,
    /// Optional separate test source; its samples are assigned to the test split.
    pub test: Option<String>,
    pub ood: Option<String>,
    /// Fraction of training samples held out for validation when the train
    /// source carries no validation split.
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            ood: None,
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

/// Flattens nested objects into dotted keys; arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    let mut out = Map::new();
    flatten_into("", value, &mut out);
    out
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cur.get(*part).is_some_and(Value::is_object) {
            cur[*part] = Value::Object(Map::new());
        }
        cur = &mut cur[*part];
    }
    cur[parts[parts.len() - 1]] = value;
}

/// Parses a command-line override value: JSON when it parses, otherwise a string.
pub fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Every addressable key.
    pub fn known_keys() -> BTreeSet<String> {
        flatten(&serde_json::to_value(ExperimentConfig::default()).expect("serializes"))
            .keys()
            .cloned()
            .collect()
    }

    /// Builds a config from flat (or nested) key/value pairs over the defaults.
    pub fn from_flat(pairs: &Map<String, Value>) -> Result<Self> {
        let known = Self::known_keys();
        let mut flat = Map::new();
        for (k, v) in pairs {
            flatten_into(k, v, &mut flat);
        }
        let mut doc = serde_json::to_value(ExperimentConfig::default()).expect("serializes");
        for (k, v) in &flat {
            if !known.contains(k) {
                return Err(Error::config(k.clone(), "unknown configuration key"));
            }
            set_path(&mut doc, k, v.clone());
        }
        match serde_json::from_value::<ExperimentConfig>(doc) {
            Ok(cfg) => {
                cfg.validate()?;
                Ok(cfg)
            }
            Err(_) => {
                // Name the first key whose value alone fails to deserialize.
                for (k, v) in &flat {
                    let mut probe = serde_json::to_value(ExperimentConfig::default()).expect("serializes");
                    set_path(&mut probe, k, v.clone());
                    if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
                        return Err(Error::config(k.clone(), e.to_string()));
                    }
                }
                Err(Error::config("<config>", "values are inconsistent"))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Reads a config file and applies `(section.key, value)` overrides on top.
    pub fn load_with_overrides(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let Value::Object(map) = value else {
            return Err(Error::format(path, "config must be a JSON object"));
        };
        let mut flat = Map::new();
        for (k, v) in &map {
            flatten_into(k, v, &mut flat);
        }
        for (k, v) in overrides {
            flat.insert(k.clone(), v.clone());
        }
        Self::from_flat(&flat)
    }

    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut flat = flatten(&serde_json::to_value(self).expect("serializes"));
        for (k, v) in overrides {
            flat.insert(k.clone(), v.clone());
        }
        Self::from_flat(&flat)
    }

    /// Flat `section.key` JSON, the same layout `load` reads.
    pub fn to_flat_json(&self) -> Value {
        Value::Object(flatten(&serde_json::to_value(self).expect("serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        self.data.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ood::{FusionNorm, ScoreKind};
    use serde_json::json;

    fn flat(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flat_keys_override_defaults() {
        let cfg = ExperimentConfig::from_flat(&flat(json!({
            "model.latent_dim": 8,
            "train.epochs": 3,
            "train.weights.rec": 0.5,
            "fusion.p": "2",
            "fusion.distance_score": "msp",
            "data.train": "idx:a:b",
        })))
        .unwrap();
        assert_eq!(cfg.model.latent_dim, 8);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.weights.rec, 0.5);
        assert_eq!(cfg.train.weights.cls, 1.0);
        assert_eq!(cfg.fusion.p, FusionNorm::L2);
        assert_eq!(cfg.fusion.distance_score, ScoreKind::Msp);
        assert_eq!(cfg.data.train.as_deref(), Some("idx:a:b"));
    }

    #[test]
    fn nested_objects_are_accepted() {
        let cfg = ExperimentConfig::from_flat(&flat(json!({"train": {"epochs": 4, "weights": {"kl": 2.0}}}))).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.weights.kl, 2.0);
    }

    #[test]
    fn unknown_key_is_named() {
        match ExperimentConfig::from_flat(&flat(json!({"train.epochz": 4}))) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.epochz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_type_is_named() {
        match ExperimentConfig::from_flat(&flat(json!({"model.latent_dim": 4, "train.batch_size": "many"}))) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_value_is_named() {
        match ExperimentConfig::from_flat(&flat(json!({"train.learning_rate": -1.0}))) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_parse_json_or_string() {
        assert_eq!(parse_override("3"), json!(3));
        assert_eq!(parse_override("inf"), json!("inf"));
        assert_eq!(parse_override("[1, 99]"), json!([1, 99]));
        let cfg = ExperimentConfig::default()
            .with_overrides(&[("fusion.p".into(), parse_override("2")), ("train.seed".into(), parse_override("7"))])
            .unwrap();
        assert_eq!(cfg.fusion.p, FusionNorm::L2);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn flat_json_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epochs = 2;
        cfg.data.ood = Some("x.csv".into());
        let back = ExperimentConfig::from_flat(cfg.to_flat_json().as_object().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
