//! Parameter checkpoints.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "gflownet-checkpoint",
//!   "version": 1,
//!   "step": <u64>,
//!   "net": { "params": { "sizes": [..], "activation": "relu",
//!                        "tensors": [{ "shape": [..], "data": [..] }, ..] },
//!            "layout": { "n_fwd": .., "n_bwd": .. } },
//!   "adam": null | { "config": {..}, "t": .., "m": [tensor..], "v": [tensor..] }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every `f64` bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::PolicyNet;
use super::optim::AdamState;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gflownet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub net: PolicyNet,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(step: u64, net: PolicyNet, adam: Option<AdamState>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step,
            net,
            adam,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let p = &ck.net.params;
        if p.tensors.len() != 2 * p.num_layers() + 1 {
            return Err(Error::Shape("checkpoint tensor count does not match sizes".into()));
        }
        for l in 0..p.num_layers() {
            if p.weight(l).shape() != [p.sizes[l], p.sizes[l + 1]]
                || p.bias(l).shape() != [p.sizes[l + 1]]
            {
                return Err(Error::Shape(format!("checkpoint layer {l} shape mismatch")));
            }
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
