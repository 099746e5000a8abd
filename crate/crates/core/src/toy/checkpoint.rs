//! Versioned JSON container for the base model and an optional adapter.
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::{ToyConfig, ToyReasonerParams};
use crate::error::{Result, VskipError};

pub const CHECKPOINT_FORMAT: &str = "vskip-toy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ToyConfig,
    pub params: ToyReasonerParams,
    pub adapter: Option<LoraAdapter>,
}

impl Checkpoint {
    pub fn new(params: ToyReasonerParams, adapter: Option<LoraAdapter>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: params.config.clone(),
            params,
            adapter,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string(ckpt)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(VskipError::Checkpoint(format!("unknown format {:?}", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(VskipError::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    if ckpt.config != ckpt.params.config {
        return Err(VskipError::Checkpoint("config does not match the stored parameters".into()));
    }
    if !ckpt.params.is_finite() {
        return Err(VskipError::Checkpoint("parameters contain non-finite values".into()));
    }
    if let Some(a) = &ckpt.adapter {
        a.check_matches(&ckpt.config)?;
    }
    Ok(ckpt)
}
