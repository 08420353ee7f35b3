//! Argument surface. Flags are sugar over configuration keys; every flag
//! override is recorded in the manifest alongside the file it beat.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "anrot",
    version,
    about = "Few-shot learning on Hellinger-distance class prototypes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic dataset archives (train/val/test).
    SynthData(CommonArgs),
    /// Train a model; writes checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the meta-test split.
    Eval(EvalArgs),
    /// Accuracy sweep over perturbation strengths.
    Sweep(SweepArgs),
    /// Reconstruction quality of a checkpoint as a Frechet distance.
    Fid(FidArgs),
    /// Class-activation heatmaps for selected records.
    Gradcam(GradcamArgs),
    /// Closed-form distance between two diagonal Gaussians.
    Dist(DistArgs),
    /// Train and compare the six attention-by-loss configurations.
    Ablate(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; overrides `out.dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Use the synthetic dataset; overrides `data.synthetic = true`.
    #[arg(long)]
    pub synthetic: bool,
    /// Read dataset archives from this directory; overrides `data.path`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Training episodes; overrides `train.episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate; overrides `eval.model`.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Evaluation episodes; overrides `eval.episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to sweep; overrides `eval.model`.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Perturbation kind; overrides `sweep.kind`.
    #[arg(long, value_name = "adversarial|gaussian")]
    pub kind: Option<String>,
    /// Comma-separated strengths; overrides `sweep.levels`.
    #[arg(long, value_name = "LIST")]
    pub levels: Option<String>,
    /// Tag rows as robust-trained; overrides `sweep.trained_robust = true`.
    #[arg(long)]
    pub trained_robust: bool,
}

#[derive(Debug, Args)]
pub struct FidArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to measure; overrides `eval.model`.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Feature extractor; overrides `fid.extractor`.
    #[arg(long, value_name = "pooled|pixel")]
    pub extractor: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to explain; overrides `eval.model`.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Target class position within the split; overrides `gradcam.class`.
    #[arg(long)]
    pub class: Option<usize>,
    /// Comma-separated record indices; overrides `gradcam.records`.
    #[arg(long, value_name = "LIST")]
    pub records: Option<String>,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    /// First Gaussian as `mean,var` pairs, e.g. `0,1` or `0,1,2,0.5`.
    #[arg(long, value_name = "LIST")]
    pub p: String,
    /// Second Gaussian in the same form.
    #[arg(long, value_name = "LIST")]
    pub q: String,
    /// One of hellinger_sq, hellinger, bc, bhattacharyya.
    #[arg(long, default_value = "hellinger_sq")]
    pub metric: String,
}
