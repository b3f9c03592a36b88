//! Metrics, serialization formats and the CLI pipeline.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod metrics;
pub mod ply;
pub mod scene_file;
pub mod views_file;
pub mod volume_file;
