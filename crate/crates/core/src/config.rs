//! Experiment configuration: JSON in which every field has a default and
//! unknown keys are hard errors, so a typo can never silently fall back
//! to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::Combiner;
use crate::fed::{FedError, FederationConfig};
use crate::geo::Channel;
use crate::synth::default_kinematics;

/// Environment variable that overrides the config's master seed.
pub const SEED_ENV_VAR: &str = "FEDMODE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    ParseError(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

/// Synthetic-data and segmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub trips_per_mode: usize,
    pub points_per_trip: usize,
    /// Motion-feature channels fed to the models, in input order.
    pub channels: Vec<Channel>,
    /// Segment length L in points.
    pub seq_len: usize,
    /// Travel modes to simulate; each must name a known kinematics
    /// profile. Class indices follow this order.
    pub class_names: Vec<String>,
    /// Distinct travel modes present in each worker's shard.
    pub modes_per_worker: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            trips_per_mode: 200,
            points_per_trip: 65,
            channels: Channel::ALL.to_vec(),
            seq_len: 10,
            class_names: default_kinematics().iter().map(|k| k.mode.name.clone()).collect(),
            modes_per_worker: 2,
        }
    }
}

/// Architecture size overrides shared by all base learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Recurrent state width and head hidden width H.
    pub hidden: usize,
    /// Convolution filter count F.
    pub cnn_filters: usize,
    /// Dropout on the head's hidden activations during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 64, cnn_filters: 32, dropout: 0.0 }
    }
}

/// One experiment, fully resolved: dataset, federation, model sizes,
/// combiner, master seed, output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub federation: FederationConfig,
    pub model: ModelConfig,
    pub combiner: Combiner,
    pub seed: u64,
    /// Output directory; the CLI's `--out` flag takes precedence.
    pub out_dir: Option<String>,
    /// Write checkpoints every this many rounds (0 = final round only).
    pub checkpoint_interval: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            federation: FederationConfig::default(),
            model: ModelConfig::default(),
            combiner: Combiner::StackedMlp,
            seed: 42,
            out_dir: None,
            checkpoint_interval: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn n_classes(&self) -> usize {
        self.dataset.class_names.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: String| {
            Err(ConfigError::InvalidValue { key: key.into(), message })
        };
        let d = &self.dataset;
        if d.trips_per_mode < 1 {
            return bad("dataset.trips_per_mode", "must be at least 1".into());
        }
        if d.points_per_trip < 2 {
            return bad("dataset.points_per_trip", "a trip needs at least 2 points".into());
        }
        if d.seq_len < 1 {
            return bad("dataset.seq_len", "must be at least 1".into());
        }
        if d.channels.is_empty() {
            return bad("dataset.channels", "need at least one channel".into());
        }
        for (i, c) in d.channels.iter().enumerate() {
            if d.channels[..i].contains(c) {
                return bad("dataset.channels", format!("duplicate channel {}", c.name()));
            }
        }
        if d.class_names.is_empty() {
            return bad("dataset.class_names", "need at least one class".into());
        }
        let known = default_kinematics();
        for (i, name) in d.class_names.iter().enumerate() {
            if !known.iter().any(|k| k.mode.name == *name) {
                return bad("dataset.class_names", format!("no kinematics profile named {name:?}"));
            }
            if d.class_names[..i].contains(name) {
                return bad("dataset.class_names", format!("duplicate class {name:?}"));
            }
        }
        if !(1..=d.class_names.len()).contains(&d.modes_per_worker) {
            return bad(
                "dataset.modes_per_worker",
                format!("must be in [1, {}]", d.class_names.len()),
            );
        }
        self.federation.validate().map_err(|e| match e {
            FedError::InvalidConfig(message) => {
                ConfigError::InvalidValue { key: "federation".into(), message }
            }
            other => {
                ConfigError::InvalidValue { key: "federation".into(), message: other.to_string() }
            }
        })?;
        if self.model.hidden < 1 {
            return bad("model.hidden", "must be at least 1".into());
        }
        if self.model.cnn_filters < 1 {
            return bad("model.cnn_filters", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout", format!("{} outside [0, 1)", self.model.dropout));
        }
        Ok(())
    }

    /// Parses and validates a config from a JSON string.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(classify_serde_error)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Loads, parses, and validates an experiment config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

/// Maps serde's unknown-field complaints to [`ConfigError::UnknownKey`]
/// carrying the offending key; everything else is a parse error.
fn classify_serde_error(err: serde_json::Error) -> ConfigError {
    let message = err.to_string();
    if let Some(rest) = message.split("unknown field `").nth(1) {
        if let Some(key) = rest.split('`').next() {
            return ConfigError::UnknownKey(key.to_string());
        }
    }
    ConfigError::ParseError(message)
}

/// The master seed override from `FEDMODE_SEED`, if set.
pub fn seed_override_from_env() -> Result<Option<u64>, ConfigError> {
    parse_seed_override(std::env::var(SEED_ENV_VAR).ok().as_deref())
}

pub fn parse_seed_override(value: Option<&str>) -> Result<Option<u64>, ConfigError> {
    match value {
        None => Ok(None),
        Some(text) => text.trim().parse::<u64>().map(Some).map_err(|e| ConfigError::InvalidValue {
            key: SEED_ENV_VAR.into(),
            message: format!("{text:?} is not a valid seed: {e}"),
        }),
    }
}
