use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "vse",
    version,
    about = "Variational state estimation: data, training, filtering and evaluation"
)]
pub struct Cli {
    /// Worker threads (1 keeps every output bit-reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate Lorenz trajectories, render camera images at a target SMNR.
    Generate(GenerateArgs),
    /// Train the prior/posterior networks on measurements only.
    Train(TrainArgs),
    /// Posterior-mean estimates for every sequence of a dataset.
    Infer(InferArgs),
    /// Bootstrap particle-filter estimates for every sequence of a dataset.
    Pf(PfArgs),
    /// Score estimates against ground truth, or report a dataset's SMNR.
    Evaluate(EvaluateArgs),
    /// NMSE versus SMNR table for the particle filter and trained models.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// JSON file with any of this command's settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long)]
    pub n: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    pub t: Option<usize>,
    /// Target SMNR in dB.
    #[arg(long, allow_negative_numbers = true)]
    pub smnr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset (states, if present, are never read).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch CSV log (default: `<out>.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use only the first N sequences.
    #[arg(long)]
    pub n_limit: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Reparameterized samples per step.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Stop after this many epochs without validation improvement (default 40; 0 disables).
    #[arg(long)]
    pub early_stop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print one line per epoch.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Estimate file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PfArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset holding the ground-truth states.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Estimate file, or a dataset whose states are taken as estimates.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Only report the dataset's measured SMNR.
    #[arg(long)]
    pub smnr_only: bool,
    /// Also write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated SMNR levels in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub smnr: Option<Vec<f64>>,
    /// Trained model for one level, as `SMNR=PATH`; repeat per level.
    #[arg(long = "model")]
    pub models: Vec<String>,
    /// Test sequences per level.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Skip the particle filter.
    #[arg(long)]
    pub no_pf: bool,
    /// Skip the learned estimator.
    #[arg(long)]
    pub no_vse: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV table to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
