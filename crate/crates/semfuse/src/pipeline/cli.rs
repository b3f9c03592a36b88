//! Command-line interface: simulate -> fuse -> train -> reconstruct ->
//! eval -> export. Every command takes `--seed` and produces byte-identical
//! artifacts for identical inputs and seeds.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use super::commands;

#[derive(Parser)]
#[command(
    name = "semfuse",
    about = "Multi-sensor semantic depth fusion with learned confidence weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render ground truth and sensor views for a scene description.
    Simulate {
        /// Scene description (TOML).
        #[arg(long)]
        scene: PathBuf,
        /// Output directory for gt.vol and views_<sensor>.svw.
        #[arg(long)]
        out: PathBuf,
        /// Sensor corruption seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Integrate simulated views into TSDFs, datacosts and features.
    Fuse {
        /// Directory produced by `simulate`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory (defaults to the input directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train confidence networks and the regularizer on fused scenes.
    Train {
        /// Training configuration (TOML) listing fused scene directories.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.json and loss_curve.txt.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the epoch count from the config file.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Solve for the labeling of a fused scene.
    Reconstruct {
        /// Fused scene directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Trained checkpoint; omitted = uniform confidences.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output label volume.
        #[arg(long)]
        out: PathBuf,
        /// Unrolled solver iterations.
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        /// Coarse-to-fine levels.
        #[arg(long, default_value_t = 1)]
        levels: usize,
        /// Also write confidence_<sensor>.vol next to the output.
        #[arg(long, default_value_t = false)]
        dump_confidence: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a predicted labeling against ground truth.
    Eval {
        /// Predicted label volume.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label volume.
        #[arg(long)]
        gt: PathBuf,
        /// Metrics report output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a label or TSDF volume as a colored-cube PLY mesh.
    Export {
        /// Input volume.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PLY path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scene, out, seed } => commands::simulate(&scene, &out, seed),
        Command::Fuse { input, out, seed: _ } => {
            let out = out.unwrap_or_else(|| input.clone());
            commands::fuse(&input, &out)
        }
        Command::Train {
            config,
            out,
            seed,
            epochs,
        } => commands::train(&config, &out, seed, epochs).map(|_| ()),
        Command::Reconstruct {
            input,
            checkpoint,
            out,
            iterations,
            levels,
            dump_confidence,
            seed: _,
        } => commands::reconstruct(
            &input,
            checkpoint.as_deref(),
            &out,
            iterations,
            levels,
            dump_confidence,
        ),
        Command::Eval {
            pred,
            gt,
            out,
            seed: _,
        } => commands::eval(&pred, &gt, out.as_deref()).map(|text| {
            if out.is_none() {
                print!("{text}");
            }
        }),
        Command::Export {
            input,
            out,
            seed: _,
        } => commands::export(&input, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
