use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore, TargetNorm};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dynframe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model state. Floats use shortest round-trip decimal text, so
/// a write/read cycle is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub target_norm: TargetNorm,
    /// Optimizer steps taken when the snapshot was written.
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            target_norm: model.target,
            step,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        self.config.validate()?;
        let expected = super::init_params(&self.config, 0)?;
        expected.check_compatible(&self.params)?;
        Ok(Model {
            config: self.config,
            params: self.params,
            target: self.target_norm,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a checkpoint file (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
