//! Command-line surface of the `upl` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "upl", version, about = "Unbiased pairwise learning from implicit feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the semi-synthetic train/validation/test splits of one run.
    Prepare(ExperimentArgs),
    /// Train and evaluate one method once.
    Train(TrainArgs),
    /// Grid search plus repeated runs for every configured method.
    Experiment(ExperimentArgs),
    /// Check estimator bias and variance on synthetic worlds.
    Verify(VerifyArgs),
    /// Rebuild the summary tables of an experiment directory.
    Report(ReportArgs),
}

/// Settings shared by the dataset-driven commands. Flags override the
/// config file, which overrides the defaults.
#[derive(Debug, Clone, Args, Default)]
pub struct ExperimentArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rating directory or `simulated`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// `triplets` or `dense`.
    #[arg(long)]
    pub format: Option<String>,
    /// Comma-separated methods.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon_train: Option<f64>,
    #[arg(long)]
    pub epsilon_test: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File with `dims`, `lambdas` and `clips`.
    #[arg(long)]
    pub grid_file: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Method to train; defaults to the first configured method.
    #[arg(long)]
    pub method: Option<String>,
    /// Latent dimension; defaults to the first grid value.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Clip threshold for the clipped UBPR variants.
    #[arg(long, allow_hyphen_values = true)]
    pub clip: Option<f64>,
    /// Run index; the run seed is `seed + run`.
    #[arg(long, default_value_t = 0)]
    pub run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Auto,
    Exact,
    Mc,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// World files; defaults to the bundled suite.
    #[arg(long = "world")]
    pub worlds: Vec<PathBuf>,
    /// Monte Carlo draws per world (at least 10000).
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `oracle.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Experiment output directory.
    #[arg(long)]
    pub out: PathBuf,
}
