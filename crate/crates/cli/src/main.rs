mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "blockprune", version, about = "Fine-grained structured pruning and sparse inference")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default from BLOCKPRUNE_THREADS, else 1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Latency model tables.
    #[command(subcommand)]
    Latmodel(LatmodelCmd),
    /// Reference model archives.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Dense training.
    Train(TrainArgs),
    /// Per-layer pruning-scheme mapping.
    #[command(subcommand)]
    Map(MapCmd),
    /// Prunes a model according to a mapping document.
    Prune(PruneArgs),
    /// Encodes every pruned layer of an archive to BCS.
    Pack(PackArgs),
    /// Inference and benchmarking.
    Run(RunArgs),
    /// Per-layer scheme, compression, MAC and latency report.
    Report(ReportArgs),
}

#[derive(Subcommand)]
pub enum LatmodelCmd {
    /// Measures every grid setting and writes the latency table
    Build(LatmodelBuildArgs),
}

#[derive(Args)]
pub struct LatmodelBuildArgs {
    /// `desk`, `full` or a JSON grid file.
    #[arg(long, default_value = "desk")]
    pub grid: String,
    #[arg(long, default_value = "host")]
    pub device_tag: String,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep the table even if some settings fail.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Subcommand)]
pub enum ModelCmd {
    /// Writes a freshly initialized reference model.
    Init(ModelInitArgs),
}

#[derive(Args)]
pub struct ModelInitArgs {
    /// mlp2, lenet5, convnet-mini or mobilenet-mini.
    #[arg(long)]
    pub arch: String,
    /// Per-sample input shape, e.g. `1,28,28`.
    #[arg(long, value_delimiter = ',')]
    pub input_shape: Option<Vec<usize>>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training hyperparameters shared by `train`, `prune` and `map search`.
#[derive(Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// MNIST-style IDX directory or `synthetic:<n>`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Subcommand)]
pub enum MapCmd {
    /// Decision-tree mapping driven by the latency table.
    Rule(MapRuleArgs),
    /// Policy-gradient search over per-layer schemes.
    Search(MapSearchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DifficultyArg {
    Easy,
    Hard,
}

#[derive(Args)]
pub struct MapRuleArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Dataset used to infer the task difficulty.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, value_enum)]
    pub difficulty: Option<DifficultyArg>,
}

#[derive(Args)]
pub struct MapSearchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// Samples per policy update.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub search_lr: Option<f64>,
    /// Retraining epochs per evaluated mapping.
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PruneMethod {
    /// Reweighted group lasso, hardening, fine-tuning.
    Reweight,
    /// Magnitude projection at the mapped rate, fine-tuning.
    OneShot,
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "reweight")]
    pub method: PruneMethod,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args)]
pub struct PackArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Evaluates accuracy on the test split when given.
    #[arg(long)]
    pub data: Option<String>,
    /// Writes the run document here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-op latency benchmark.
    #[arg(long)]
    pub bench: bool,
    #[arg(long)]
    pub runs: Option<usize>,
    /// GA-tune kernel parameters per sparse op before running.
    #[arg(long)]
    pub tune: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable elementwise fusion.
    #[arg(long)]
    pub no_fuse: bool,
    /// Disable row reordering.
    #[arg(long)]
    pub no_reorder: bool,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Latency table for per-layer estimates.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Run document with benchmark records.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", commands::error_document(&e));
            ExitCode::FAILURE
        }
    }
}
