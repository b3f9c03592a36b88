//! Multi-sensor semantic depth fusion with learned per-voxel confidence weights.
//!
//! The library fuses depth maps from several heterogeneous sensors into a
//! semantically labeled voxel reconstruction. Each sensor's measurements are
//! integrated into a truncated signed distance volume and a per-label evidence
//! volume; a small fully connected network maps per-voxel image features to a
//! confidence weight for every sensor, and an unrolled primal-dual solver with
//! a learned convolutional regularizer turns the weighted evidence into label
//! probabilities. Everything is differentiable, so confidences, regularizer
//! kernels and step sizes train end-to-end against voxel ground truth.
//!
//! A synthetic scene generator ([`simdata`]) and a CLI ([`pipeline`]) make the
//! whole loop — simulate, fuse, train, reconstruct, evaluate, export —
//! reproducible on a desktop CPU.

pub mod confidence;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod imagery;
pub mod pipeline;
pub mod simdata;
pub mod training;
pub mod varsolver;

pub use error::{Error, Result};
