//! Command-line pipeline for dot-annotated cell counting:
//! `ingest → stats → synth → split → train → eval → ablate → report`.
//!
//! Every subcommand is a plain function over a parsed [`Cli`], so the same
//! code path runs from the binary and from tests.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

mod commands;
pub mod config;

pub use config::RunConfig;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CELLCOUNT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] cellcount_core::Error),
}

impl CliError {
    /// 2 for configuration errors, 3 for data errors, 4 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        use cellcount_core::ErrorKind;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            },
        }
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_core!(
    cellcount_core::error::AnnotationError,
    cellcount_core::error::ImagingError,
    cellcount_core::error::SplitError,
    cellcount_core::error::MetricsError,
    cellcount_core::error::ModelError,
    cellcount_core::error::TrainError,
    cellcount_core::error::SynthError
);

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cellcount", version, about = "Density-map cell counting pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pair images with CellCounter XML or CSV annotations, clean, and write
    /// a dataset.
    Ingest {
        /// Directory with `images/` and `annotations/`.
        src: PathBuf,
        /// Marker for annotations without a metadata row.
        #[arg(long)]
        marker: Option<String>,
        /// Magnification for annotations without a metadata row (20x or 40x).
        #[arg(long)]
        magnification: Option<String>,
    },
    /// Cells-per-image statistics by marker and magnification.
    Stats { dataset: PathBuf },
    /// Generate a synthetic corpus in dataset layout.
    Synth {
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Jenks-stratified train/validation/test split.
    Split {
        dataset: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        k_bins: Option<usize>,
        #[arg(long)]
        validation_ratio: Option<f64>,
    },
    /// Train a model and keep the lowest-validation-MAE checkpoint.
    Train {
        dataset: PathBuf,
        /// Split CSV from `split`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// density_mse or count_mse.
        #[arg(long)]
        objective: Option<String>,
        /// Train only the head.
        #[arg(long)]
        frozen: bool,
        /// Search the config's `train.grid` candidates first and train
        /// with the best.
        #[arg(long)]
        grid: bool,
    },
    /// Evaluate a checkpoint, the ground-truth oracle or the training-mean
    /// baseline on one subset.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, required_unless_present_any = ["oracle", "baseline"], conflicts_with_all = ["oracle", "baseline"])]
        checkpoint: Option<PathBuf>,
        /// Predict the ground-truth map of every image.
        #[arg(long, conflicts_with = "baseline")]
        oracle: bool,
        /// Predict the mean training count for every image.
        #[arg(long)]
        baseline: bool,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
    },
    /// Encoder freezing × head depth grid.
    Ablate {
        dataset: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Combine evaluation and ablation outputs into one markdown report.
    Report {
        /// Directories written by `eval` or `ablate`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Runs one parsed command, writing progress and tables to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = Some(seed);
    }
    commands::dispatch(&cli.command, &cli.common, &mut cfg, out)
}

/// Builds the global worker pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}
