//! Run configuration file.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//! dataset = "data/manifest.csv"
//!
//! [model]
//! use_hopfield = false
//!
//! [model.backbone]
//! featconv_channels = [8, 16]
//!
//! [synthetic]
//! samples = 600
//!
//! [optim]
//! epochs_stage1 = 4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Manifest used by `train` and `eval`; has no default.
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub synthetic: SyntheticSpec,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            dataset: None,
            model: ModelConfig::default(),
            synthetic: SyntheticSpec::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset manifest given (set `dataset` or pass --data)".into()))
    }
}
