//! JSON checkpoint holding every trainable plus the optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::MlpParams;
use crate::error::{Error, Result};
use crate::training::{AdamState, TrainState};
use crate::varsolver::RegularizerW;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub label_names: Vec<String>,
    pub mlps: Vec<MlpParams>,
    pub w: RegularizerW,
    pub log_sigma: f64,
    pub log_tau: f64,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, label_names: Vec<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            epoch: state.epoch,
            label_names,
            mlps: state.mlps.clone(),
            w: state.w.clone(),
            log_sigma: state.log_sigma,
            log_tau: state.log_tau,
            adam: state.adam.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            mlps: self.mlps,
            w: self.w,
            log_sigma: self.log_sigma,
            log_tau: self.log_tau,
            adam: self.adam,
            epoch: self.epoch,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, ckpt)
        .map_err(|e| Error::data(format!("checkpoint serialization failed: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let r = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(r)
        .map_err(|e| Error::format(0, format!("invalid checkpoint: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            0,
            format!("unsupported checkpoint version {}", ckpt.version),
        ));
    }
    Ok(ckpt)
}
