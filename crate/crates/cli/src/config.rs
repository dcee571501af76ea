//! Run configuration.
//!
//! One JSON document drives every subcommand. Each section is optional and
//! falls back to its default; keys inside a section match the corresponding
//! struct fields one to one, and unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shortcut_probe_core::model::{ModelConfig, TrunkConfig};
use shortcut_probe_core::objectives::LossWeights;
use shortcut_probe_core::synth::{GenSpec, SplitPlan, CHANNELS};
use shortcut_probe_core::train::TrainConfig;

use crate::experiments::ExperimentPlan;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },
}

/// Root of the JSON configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootConfig {
    /// Synthetic data generator; omitted means the experiment's default set.
    pub gen: Option<GenSpec>,
    /// Split knobs (dev fraction, fold count); assignments are derived.
    pub split: SplitPlan,
    /// Model architecture; omitted means the default trunk sized to the data.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub plan: ExperimentPlan,
}

impl RootConfig {
    /// The model configuration to train, sized for `(channels, h, w)` patches
    /// when no explicit model section was given.
    pub fn resolved_model(&self, shape: (usize, usize, usize)) -> ModelConfig {
        match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig {
                trunk: TrunkConfig {
                    input_shape: shape,
                    ..TrunkConfig::default()
                },
                ..ModelConfig::default()
            },
        }
    }

    /// Generator spec for a quick default run of size `(3, s, s)`.
    pub fn gen_or(&self, fallback: GenSpec) -> GenSpec {
        self.gen.clone().unwrap_or(fallback)
    }
}

pub fn load_config(path: &Path) -> Result<RootConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text).map_err(|detail| ConfigError::Parse {
        path: path.to_path_buf(),
        detail,
    })
}

pub fn parse_config(text: &str) -> Result<RootConfig, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

/// Default patch channel count, re-exported for shape checks.
pub const PATCH_CHANNELS: usize = CHANNELS;
