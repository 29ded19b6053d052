//! Self-describing JSON checkpoints.

use super::{AdamWState, SamplerState, TrainConfig};
use crate::error::{Error, Result};
use crate::pipeline::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// sha256 over the model and training configs.
    pub config_hash: String,
    pub train_config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamWState,
    pub step: usize,
    pub sampler: SamplerState,
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        cfg: &TrainConfig,
        hash: &str,
        opt: &AdamWState,
        step: usize,
        sampler: &SamplerState,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash.to_string(),
            train_config: cfg.clone(),
            model: model.clone(),
            optimizer: opt.clone(),
            step,
            sampler: sampler.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let expect = config_hash(&ck.model.config, &ck.train_config);
        if ck.config_hash != expect {
            return Err(Error::Checkpoint("config hash does not match the stored configs".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
