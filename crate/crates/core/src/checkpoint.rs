//! Parameter checkpoints as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::Config;
use crate::error::{Result, TdaError};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: Config,
    /// Epochs completed.
    pub epoch: usize,
    /// Training steps completed.
    pub step: usize,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| TdaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TdaError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TdaError::Config(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                ckpt.format
            )));
        }
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}
