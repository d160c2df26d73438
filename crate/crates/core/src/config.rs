//! Run configuration: one TOML file describing the dataset, the model, the
//! training schedule and the evaluation protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::retrieval::{fingerprint, EvalConfig};
use crate::train::TrainConfig;

/// Every knob of a run. Missing sections take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.image.canvas_px != self.dataset.canvas_px {
            return Err(Error::Config(format!(
                "model.image.canvas_px ({}) differs from dataset.canvas_px ({})",
                self.model.image.canvas_px, self.dataset.canvas_px
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the snapshot stored next to every output.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(&self.to_toml()?))
    }

    /// The configuration of the mini-CSS ordering experiment.
    pub fn mini_css() -> Self {
        let mut cfg = RunConfig::default();
        cfg.dataset.n_base = 200;
        cfg.dataset.n_queries = 2000;
        cfg.dataset.test_n_base = Some(100);
        cfg.dataset.test_n_queries = Some(1000);
        cfg
    }
}
