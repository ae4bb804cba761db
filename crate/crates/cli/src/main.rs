//! `vibra`: synthesize, annotate, window, train, evaluate, search and report
//! on surface-vibration gesture recordings. Every command writes under one
//! run directory (`--out`) and records itself in `manifest.json`.

mod commands;
mod config;
mod report;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vibra::pipeline::AnnotationSource;

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "vibra", version, about = "Surface-vibration gesture recognition pipeline")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the generator, training and search budget draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every output and the manifest.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replace outputs of a step that already completed with other inputs.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with ground truth into `<out>/data`.
    Synth {
        #[arg(long, default_value_t = 15)]
        participants: u16,
        #[arg(long, default_value_t = 10)]
        sessions: u16,
    },
    /// Detect gesture onsets in every recording and write annotations next
    /// to the dataset, with an automation report.
    Annotate {
        /// Dataset index (default: `<out>/data/index.json`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Pre-process annotated recordings into a model-ready window store.
    Window {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
    /// Cross-validate the model and save per-fold checkpoints and metrics.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// PS, PS:k, LOSO, AOS or POOLED:k.
        #[arg(long)]
        split: Option<String>,
        /// 4 (swipes) or 6.
        #[arg(long)]
        gestures: Option<usize>,
    },
    /// Evaluate trained checkpoints on their folds' test sessions, or one
    /// checkpoint on a chosen fold.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        gestures: Option<usize>,
        /// A single checkpoint to evaluate instead of a training run's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fold whose test sessions are used (default: all sessions).
        #[arg(long, requires = "checkpoint")]
        fold: Option<String>,
    },
    /// Grid search over pre-processing and model hyperparameters; resumes
    /// from its journal.
    Search {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Search space file (TOML), replacing `[search.space]`.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        gestures: Option<usize>,
        /// Evaluate a seeded subset of this many configs.
        #[arg(long)]
        budget: Option<usize>,
        /// Stop after this many new configs (the rest stay pending).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Summarize training runs as an accuracy/precision table; optionally
    /// plot a recording raw and filtered.
    Report {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Recording id to plot, e.g. p01_s01.
        #[arg(long)]
        plot: Option<String>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SourceArg {
    Detected,
    GroundTruth,
}

impl From<SourceArg> for AnnotationSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Detected => AnnotationSource::Detected,
            SourceArg::GroundTruth => AnnotationSource::GroundTruth,
        }
    }
}

/// Outcome of a command that ran without error.
pub enum Status {
    Complete,
    /// Some requested work is still pending.
    Incomplete(String),
}

fn run(cli: Cli) -> Result<Status> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    }
    .with_seed(cli.seed);
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    commands::dispatch(&cli, cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Incomplete(msg)) => {
            eprintln!("incomplete: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
