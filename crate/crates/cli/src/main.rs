//! `coca`: generate synthetic data, train, evaluate, gradient-check and
//! run ablation sweeps over contrastive captioner models.
//!
//! Configuration precedence, lowest to highest: preset defaults, then the
//! `--config` file, then `--set key=value` flags, then `--seed`.

mod commands;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "coca",
    version,
    about = "Joint contrastive + captioning image-text pretraining at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-source image/caption dataset.
    GenData(GenDataArgs),
    /// Pretrain a model with the joint contrastive + captioning loss.
    Train(TrainArgs),
    /// Run a downstream protocol on a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of the joint loss on a micro model.
    Gradcheck(GradcheckArgs),
    /// Train every variant of one design axis and tabulate the results.
    Ablate(AblateArgs),
    /// Print the parameter census of a configuration.
    Census(CensusArgs),
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Preset to start from [default: coca-tiny, or the file's `preset`].
    #[arg(long)]
    pub preset: Option<String>,
    /// `key = value` file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` file with any of: classes, per_class,
    /// test_per_class, size, channels, noise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Examples per class and source, held-out ones included.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Standard deviation of the pixel noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: config, checkpoints and curves.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue the run in --out from its checkpoint, with its saved config.
    #[arg(long, conflicts_with_all = ["preset", "config", "set", "seed"])]
    pub resume: bool,
    /// Stop after this many completed updates.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Print a curve row every N steps (0 = never).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Zeroshot,
    Retrieval,
    Caption,
    Frozen,
    Video,
    Multimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Relevance {
    /// Only the paired item counts as a hit.
    Pair,
    /// Any item of the same class counts as a hit.
    Class,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Run config of the checkpoint [default: config.txt beside it].
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Report file [default: eval_<task>.txt beside the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use only the first N held-out examples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Retrieval hit criterion.
    #[arg(long, value_enum, default_value = "class")]
    pub relevance: Relevance,
    /// Frames sampled per clip for the video task.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Seed of head training and pair sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps of the frozen/multimodal heads.
    #[arg(long)]
    pub head_steps: Option<usize>,
    #[arg(long)]
    pub head_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `key = value` overrides of the micro model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: break the backward rule of this op (e.g. matmul).
    #[arg(long)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// One of loss_ratio, n_uni_split, pooler_variant, n_query, cls_design.
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Table file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CensusArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Process exit statuses.
pub mod exit {
    pub const BAD_INVOCATION: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const IO: u8 = 4;
}

/// A check that ran to completion and failed.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_status(err: &anyhow::Error) -> u8 {
    use coca_core::Error as E;
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return exit::NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Format(_) => exit::IO,
                E::NonFinite { .. } | E::Numerics(_) | E::Frozen(_) => exit::NUMERIC,
                E::Config(_) | E::Model(_) | E::Data(_) | E::Eval(_) => exit::BAD_INVOCATION,
            };
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
    }
    exit::BAD_INVOCATION
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Census(a) => commands::census(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
