//! `mscl`: synthesize data, segment, train, generate, evaluate, gradcheck.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mscl", version, about = "Multi-view chest X-ray report generation")]
pub struct Cli {
    /// TOML run configuration; unspecified values take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus (PNGs plus manifest.jsonl).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        studies: usize,
        #[arg(long, default_value_t = 0.3)]
        abnormal_rate: f64,
    },
    /// Segment every PNG in a directory.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Replay exported proposal manifests instead of the built-in backend.
        #[arg(long)]
        proposals_dir: Option<PathBuf>,
    },
    /// Train on a manifest split 7:1:2 into train/val/test.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `<out>/state.ckpt`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Decode reports for one split with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Beam width; greedy when omitted.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a generations file.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        /// Defaults to `<generations>.metrics.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the end-to-end loss.
    Gradcheck {
        /// Perturb the analytic gradient of the named check.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Args, Debug, Clone, Copy, Default)]
pub struct Ablation {
    /// Use only the first view of each study.
    #[arg(long)]
    pub single_view: bool,
    /// Drop the contrastive term (lambda = 1).
    #[arg(long)]
    pub no_cl: bool,
    /// Feed raw images to the extractor.
    #[arg(long)]
    pub no_sam: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
