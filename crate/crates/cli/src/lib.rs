//! The `baris` command line: scene generation, training, evaluation,
//! gradient checks and parameter audits.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),

    #[error(transparent)]
    Harness(baris_harness::HarnessError),

    #[error("{0}")]
    Failed(String),
}

impl From<baris_harness::HarnessError> for CliError {
    fn from(e: baris_harness::HarnessError) -> Self {
        match e {
            baris_harness::HarnessError::Config(m) => CliError::Config(m),
            other => CliError::Harness(other),
        }
    }
}

impl From<baris_core::TensorError> for CliError {
    fn from(e: baris_core::TensorError) -> Self {
        CliError::Harness(e.into())
    }
}

impl CliError {
    /// 2 for a diverged training run, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Harness(baris_harness::HarnessError::Divergence { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "baris", version, about = "Boundary-aware segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic degraded scenes to a dataset directory.
    GenData(GenDataArgs),
    /// Train a pipeline and write metrics and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    GradCheck(GradCheckArgs),
    /// Count trainable parameters per fine-tuning scheme.
    ParamAudit(ParamAuditArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reads the `[scene]` section of a run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub max_instances: Option<usize>,
    /// Attenuation ranges as `v` or `lo,hi`.
    #[arg(long)]
    pub red: Option<String>,
    #[arg(long)]
    pub green: Option<String>,
    #[arg(long)]
    pub blue: Option<String>,
    #[arg(long)]
    pub blur_sigma: Option<String>,
    #[arg(long)]
    pub haze: Option<String>,
    #[arg(long)]
    pub noise_sigma: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; overrides `data.dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// `ce_only` or `ce_plus_bace`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub bace_scale: Option<usize>,
    #[arg(long)]
    pub bace_lambda: Option<f64>,
    /// `max` or `avg`.
    #[arg(long)]
    pub bace_pool: Option<String>,
    /// `none` or `era`.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Insert adapters (default settings unless the config has `[era]`).
    #[arg(long)]
    pub era: bool,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub num_envs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Epoch of the checkpoint; the latest by default.
    #[arg(long)]
    pub epoch: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// `all`, `tensor`, `decoder`, `era` or `bace`.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ParamAuditArgs {
    /// `toy` or `swin-b-ref`.
    #[arg(long, default_value = "toy")]
    pub backbone: String,
    /// `full`, `era`, `bitfit`, `norm_only` or `all`.
    #[arg(long, default_value = "all")]
    pub scheme: String,
    #[arg(long, default_value_t = 2)]
    pub gamma: usize,
    #[arg(long, default_value_t = 16)]
    pub num_envs: usize,
    /// `tsv` or `json`.
    #[arg(long, default_value = "tsv")]
    pub format: String,
}

/// Runs a parsed command, writing its report to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &mut out),
        Command::Train(a) => commands::train(&a, &mut out),
        Command::Eval(a) => commands::eval(&a, &mut out),
        Command::GradCheck(a) => commands::grad_check(&a, &mut out),
        Command::ParamAudit(a) => commands::param_audit(&a, &mut out),
    }
}

/// Sizes the global worker pool from `BARIS_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BARIS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("BARIS_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))
}
