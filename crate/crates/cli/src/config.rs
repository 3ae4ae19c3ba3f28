//! The `--config` file: one TOML document with optional sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgnet::media::FlowBackend;
use sgnet::model::ModelConfig;
use sgnet::train::{KdTrainConfig, TrainConfig};
use sgnet::{Error, Result};

use crate::edit::CropConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kd: KdTrainConfig,
    pub edit: CropConfig,
    pub flow: FlowBackend,
    /// Whether the file set `[model]`; otherwise commands that load a
    /// checkpoint use the checkpoint's own model settings.
    #[serde(skip)]
    pub has_model: bool,
}

impl CliConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.has_model = table.contains_key("model");
        c.model.validate()?;
        c.train.validate()?;
        c.kd.kd.weights.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies a run seed to every seeded section.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.kd.seed = seed;
        self.edit.seed = seed;
    }
}
