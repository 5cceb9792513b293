//! `sfl` — command-line surface of the spectral filter lab.
//!
//! Subcommands: `gen-data` (synthetic SBM datasets), `train` (one run or a
//! k-fold, chosen by the dataset's split type), `sweep-k` (the K-ablation
//! grid), `compare` (models x datasets tables), `filter-response` (scalar
//! response curves) and `check` (the oracle/invariant suites).
//!
//! Conventions: every output lands under `--out`; JSON config files mirror
//! the library config structs and `--set key=value` overrides apply after
//! the file parse with unknown keys rejected; the `SFL_SEED` environment
//! variable, when set, overrides the seed from any source. Exit code 0 on
//! success, 1 with a one-line `sfl: error: ...` otherwise (clap usage
//! errors exit 2).

mod commands;
mod util;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sfl",
    version,
    about = "Spectral filter lab: orthogonal-polynomial graph filters at desk scale",
    after_help = "Environment:\n  SFL_SEED  overrides the seed of any subcommand that takes one"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stochastic block model dataset directory
    GenData(GenDataArgs),
    /// Train one model on a dataset (k-fold when the dataset has folds)
    Train(TrainArgs),
    /// Train a grid of (model, K) cells and emit the ablation table
    SweepK(SweepKArgs),
    /// Compare models across datasets with paired seeds
    Compare(CompareArgs),
    /// Dump scalar basis responses P_k(x) over a grid as CSV
    FilterResponse(FilterResponseArgs),
    /// Run the oracle and invariant suites
    Check(CheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of nodes
    #[arg(long)]
    n: Option<usize>,
    /// Number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Target edge homophily in [0, 1]
    #[arg(long)]
    homophily: Option<f64>,
    /// Expected average degree
    #[arg(long)]
    avg_degree: Option<f64>,
    /// Feature dimension
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Norm of each class-mean feature vector
    #[arg(long)]
    class_sep: Option<f64>,
    /// Generator seed
    #[arg(long)]
    seed: Option<u64>,
    /// Write a fold assignment with this many folds instead of fixed masks
    #[arg(long)]
    folds: Option<usize>,
    /// Replace the default 60/20/20 split with a citation-style split of
    /// this many train nodes per class
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Validation pool size for --train-per-class (default 200)
    #[arg(long)]
    val_count: Option<usize>,
    /// JSON file with an SbmConfig to start from
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after the file parse (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model name: chebynet, s-jacobinet, l-jacobinet, laguerrenet, meixnernet, krawtchouknet
    #[arg(long)]
    model: Option<String>,
    /// Filter order K
    #[arg(long)]
    k: Option<usize>,
    /// Hidden width H
    #[arg(long)]
    hidden: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate for shape parameters (0 freezes them)
    #[arg(long)]
    shape_lr: Option<f64>,
    /// Decoupled weight decay on linear weights
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Dropout rate between the two layers
    #[arg(long)]
    dropout: Option<f64>,
    /// Epoch cap
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs
    #[arg(long)]
    patience: Option<usize>,
    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Skip per-epoch activation telemetry in the result file
    #[arg(long)]
    no_telemetry: bool,
    /// LayerNorm placement: per-term or post-sum
    #[arg(long)]
    norm_placement: Option<String>,
    /// Krawtchouk truncation order N (defaults to K)
    #[arg(long)]
    krawtchouk_n: Option<u32>,
    /// Also write the best-validation checkpoint
    #[arg(long)]
    save_checkpoint: bool,
    /// JSON file with a TrainConfig to start from
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after the file parse (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for result files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepKArgs {
    /// Comma-separated model names
    #[arg(long)]
    models: String,
    /// Comma-separated filter orders
    #[arg(long)]
    k: String,
    /// Number of paired seeds per cell
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Base seed; cell seeds are base..base+seeds
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory (fixed masks)
    #[arg(long)]
    data: PathBuf,
    /// Worker pool size
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON file with a TrainConfig to start from
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after the file parse (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated model names
    #[arg(long)]
    models: String,
    /// Comma-separated dataset directories
    #[arg(long)]
    data: String,
    /// Filter order K
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Paired repeats per model on fixed-split datasets
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Base seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker pool size
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON file with a TrainConfig to start from
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after the file parse (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterResponseArgs {
    /// Family: chebyshev, jacobi, laguerre, meixner, krawtchouk
    #[arg(long)]
    family: String,
    /// Highest degree K
    #[arg(long)]
    k: usize,
    /// Grid as min:max:count
    #[arg(long)]
    grid: String,
    /// Jacobi/Laguerre alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// Jacobi/Meixner beta
    #[arg(long)]
    beta: Option<f64>,
    /// Meixner c
    #[arg(long)]
    c: Option<f64>,
    /// Krawtchouk p
    #[arg(long)]
    p: Option<f64>,
    /// Krawtchouk order N
    #[arg(long)]
    big_n: Option<u32>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Run only the suite with this name
    #[arg(long)]
    only: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::SweepK(args) => commands::sweep_k(args),
        Command::Compare(args) => commands::compare(args),
        Command::FilterResponse(args) => commands::filter_response(args),
        Command::Check(args) => commands::check(args),
    };
    if let Err(e) = outcome {
        eprintln!("sfl: error: {e:#}");
        std::process::exit(1);
    }
}
