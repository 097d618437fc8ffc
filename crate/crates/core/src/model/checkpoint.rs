use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::EncoderParams;
use crate::error::{Error, Result};
use crate::memory::SampleMemory;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab_hash: String,
    pub params: EncoderParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<SampleMemory>,
}

impl Checkpoint {
    pub fn new(params: EncoderParams, vocab_hash: impl Into<String>) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, vocab_hash: vocab_hash.into(), params, memory: None }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parse and check the version and vocabulary hash.
    pub fn from_json(text: &str, expected_vocab_hash: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.vocab_hash != expected_vocab_hash {
            return Err(Error::config(format!(
                "checkpoint vocabulary hash {} does not match {}",
                ck.vocab_hash, expected_vocab_hash
            )));
        }
        if ck.params.emb.rows() != ck.params.dims.vocab || !ck.params.is_finite() {
            return Err(Error::config("checkpoint parameters are inconsistent or non-finite"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_vocab_hash: &str) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?, expected_vocab_hash)
    }
}
