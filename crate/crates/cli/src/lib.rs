//! Command-line front end for the machsim pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration, 4 missing input.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
pub mod stamp;

pub use config::ProjectConfig;

/// Environment variable that overrides the feature cache directory.
pub const CACHE_DIR_ENV: &str = "MACHSIM_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "machsim", version, about = "Machine-oriented image quality: dataset building, training and evaluation")]
pub struct Cli {
    /// Project config file (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the reproducibility stamp, for commands without an
    /// output file of their own.
    #[arg(long, global = true)]
    pub stamp: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a labeled pair manifest from a directory of PNG references.
    BuildDataset(BuildDatasetArgs),
    /// Fit the metric head on a manifest.
    TrainMetric(TrainMetricArgs),
    /// Score a metric against the labeled pairs of a manifest.
    EvalMetric(EvalMetricArgs),
    /// Score one distorted image against its reference with a checkpoint.
    Score(ScoreArgs),
    /// BD-rate between two rate-task curves.
    BdRate(BdRateArgs),
    /// Summary statistics of a manifest.
    Stats(StatsArgs),
    /// Write synthetic reference PNGs.
    GenRefs(GenRefsArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Distortion library file; the bundled library when omitted.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Voter pool file; the built-in desk pool when omitted.
    #[arg(long)]
    pub voters: Option<PathBuf>,
    /// PSNR tolerance in dB.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackboneArgs {
    /// Backbone id: `synthetic` or `vit-b16`.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Weights directory for `vit-b16`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Seed of the reference-level test holdout.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainMetricArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub hard_labels: bool,
    #[arg(long)]
    pub keep_ties: bool,
    /// full, global_only, uniform_weights, per_layer_weights, token_only or
    /// hard_labels.
    #[arg(long, default_value = "full")]
    pub ablation: String,
}

#[derive(Debug, Args)]
pub struct EvalMetricArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `psnr`, `ms_ssim`, `clipscore` or a checkpoint path.
    #[arg(long)]
    pub metric: String,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// `all`, `test` (held-out references) or `train` (the rest).
    #[arg(long, default_value = "all")]
    pub split: String,
    #[command(flatten)]
    pub holdout: SplitArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BdRateArgs {
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to `<manifest>.stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenRefsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0:#}")]
    Run(#[from] anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Run(_) => 1,
            Failure::Config(_) => 3,
            Failure::MissingInput(_) => 4,
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

/// Runs with the process's stdout and stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_command_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// `argv` includes the program name.
pub fn run_command_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return e.exit_code();
        }
    };
    match commands::dispatch(&cli, out) {
        Ok(()) => 0,
        Err(f) => {
            log::debug!("{f:?}");
            let _ = writeln!(err, "error: {f}");
            f.exit_code()
        }
    }
}
