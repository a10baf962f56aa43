//! The run configuration file: network, training, augmentation and data
//! sections. Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use lwanet::data::AugmentConfig;
use lwanet::network::NetworkConfig;
use lwanet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `<split>/images`, `<split>/masks` and `classes.json`.
    pub root: Option<PathBuf>,
    pub split: String,
    /// Separate validation split; otherwise a hashed holdout of `split`.
    pub val_split: Option<String>,
    /// Generate this many procedural samples instead of reading `root`.
    pub synthetic: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            split: "train".into(),
            val_split: None,
            synthetic: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Parse `WIDTHxHEIGHT` into `[height, width]`.
pub fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {s:?} is not WIDTHxHEIGHT"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok([h, w])
}
