//! Run configuration as a single JSON document.
//!
//! Every section and field is optional; missing values take the desk-scale
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cer::CerConfig;
use crate::error::{Error, Result};
use crate::io::read_text;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub cer: CerConfig,
    pub train: TrainConfig,
    /// Seed of the synthetic text embedding provider.
    pub embedding_seed: u64,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
