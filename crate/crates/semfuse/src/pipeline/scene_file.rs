//! Declarative TOML documents: the scene description consumed by
//! `simulate`/`fuse` and the training configuration consumed by `train`.
//!
//! Scene schema (all keys shown; `fusion` and sensor `components` have
//! defaults):
//!
//! ```toml
//! grid_origin = [0.0, 0.0, 0.0]
//! voxel_size = 0.1
//! grid_dims = [64, 64, 32]
//! n_views = 24
//! trajectory_seed = 7
//!
//! [scene]
//! name = "room1"
//! labels = ["free", "floor", "wall", "ceiling", "table", "box"]
//! interior_min = [0.4, 0.4, 0.4]
//! interior_max = [6.0, 6.0, 2.8]
//!
//! [[scene.boxes]]
//! label = 2
//! min = [0.0, 0.0, 0.0]
//! max = [0.4, 6.4, 3.2]
//!
//! [[scene.textures]]
//! base = 0.5
//! stripe_freq = 6.0
//!
//! [camera]
//! width = 80
//! height = 60
//! fx = 60.0
//! fy = 60.0
//! cx = 40.0
//! cy = 30.0
//!
//! [[sensors]]
//! name = "kinect"
//! components = [{ kind = "gaussian", a = 0.002, b = 0.002 }]
//!
//! [fusion]
//! trunc = 0.3
//! delta_free = 0.1
//! delta_occ = 1.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simdata::SceneSetup;
use crate::training::TrainingConfig;

pub fn save_scene(path: &Path, setup: &SceneSetup) -> Result<()> {
    let text = toml::to_string(setup)
        .map_err(|e| Error::data(format!("scene serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneSetup> {
    let text = fs::read_to_string(path)?;
    let setup: SceneSetup =
        toml::from_str(&text).map_err(|e| Error::data(format!("invalid scene file: {e}")))?;
    if setup.scene.textures.len() < setup.scene.labels.len() {
        return Err(Error::data(
            "scene must define one texture per label".to_string(),
        ));
    }
    Ok(setup)
}

/// Training run description: hyperparameters plus the fused scene
/// directories to train on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub scenes: Vec<PathBuf>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop_dim: usize,
    pub lambda_f: f64,
    pub epochs: usize,
    pub seed: u64,
    pub solver_iterations: usize,
    pub eps_log: f64,
    pub batches_per_epoch: usize,
    pub freeze_confidence: bool,
    pub learn_step_sizes: bool,
    pub w_init_tv: f64,
    pub w_init_noise: f64,
}

impl Default for TrainFile {
    fn default() -> Self {
        let c = TrainingConfig::default();
        Self {
            scenes: Vec::new(),
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            crop_dim: c.crop_dim,
            lambda_f: c.lambda_f,
            epochs: c.epochs,
            seed: c.seed,
            solver_iterations: c.solver_iterations,
            eps_log: c.eps_log,
            batches_per_epoch: c.batches_per_epoch,
            freeze_confidence: c.freeze_confidence,
            learn_step_sizes: c.learn_step_sizes,
            w_init_tv: c.w_init_tv,
            w_init_noise: c.w_init_noise,
        }
    }
}

impl TrainFile {
    pub fn to_config(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            crop_dim: self.crop_dim,
            lambda_f: self.lambda_f,
            epochs: self.epochs,
            seed: self.seed,
            solver_iterations: self.solver_iterations,
            eps_log: self.eps_log,
            batches_per_epoch: self.batches_per_epoch,
            freeze_confidence: self.freeze_confidence,
            learn_step_sizes: self.learn_step_sizes,
            w_init_tv: self.w_init_tv,
            w_init_noise: self.w_init_noise,
        }
    }
}

pub fn load_train_file(path: &Path) -> Result<TrainFile> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::data(format!("invalid training config: {e}")))
}

pub fn save_train_file(path: &Path, tf: &TrainFile) -> Result<()> {
    let text = toml::to_string(tf)
        .map_err(|e| Error::data(format!("training config serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}
