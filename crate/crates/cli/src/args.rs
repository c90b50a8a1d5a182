use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use layermorph::{Activation, Algorithm};

#[derive(Debug, Parser)]
#[command(
    name = "layermorph",
    version,
    about = "Grow a trained MLP by one sparsified hidden layer"
)]
pub struct Cli {
    /// Root directory for every artifact written; relative output paths are resolved under it.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a parent network from scratch.
    Train(TrainArgs),
    /// Insert a sparsified layer into a trained network.
    Morph(MorphArgs),
    /// Report loss and accuracy of a saved network.
    Eval(EvalArgs),
    /// Continue training a saved network.
    Finetune(FinetuneArgs),
    /// Run the built-in invariant checks.
    Verify(VerifyArgs),
    /// Run the full train, morph, fine-tune experiment and write a CSV report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataSource {
    Mnist,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DataSource::Mnist)]
    pub data: DataSource,
    /// Directory with the four MNIST IDX files (optionally gzipped).
    #[arg(long, env = "MNIST_DIR", default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Synthetic training rows.
    #[arg(long, default_value_t = 2000)]
    pub synth_n: usize,
    /// Synthetic test rows.
    #[arg(long, default_value_t = 500)]
    pub synth_test_n: usize,
    #[arg(long, default_value_t = 20)]
    pub synth_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub synth_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SgdArgs {
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse::<Activation>().map_err(|e| e.to_string())
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

/// Comma-separated layer widths, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch(pub Vec<usize>);

fn parse_arch(s: &str) -> Result<Arch, String> {
    let widths: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| {
            format!("architecture must be comma-separated positive integers, got {s:?}")
        })?;
    if widths.len() < 2 || widths.contains(&0) {
        return Err(format!(
            "architecture needs at least two positive widths, got {s:?}"
        ));
    }
    Ok(Arch(widths))
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Layer widths including input and output, e.g. 784,64,10.
    #[arg(long, value_parser = parse_arch, default_value = "784,64,10")]
    pub arch: Arch,
    /// Hidden-layer activation; the output layer is always linear.
    #[arg(long, value_parser = parse_activation, default_value = "relu")]
    pub act: Activation,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[arg(long, default_value = "parent.model")]
    pub out: PathBuf,
    /// Training-history CSV; defaults to the model path with a .history.csv suffix.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SparseArgs {
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Coordinate-descent sweep limit.
    #[arg(long, default_value_t = 1000)]
    pub max_itr: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    /// Stop once at most this many neurons survive.
    #[arg(long, default_value_t = 0)]
    pub target_nnz: usize,
    /// Scale surviving neurons by β before refitting the next layer (relu/identity only).
    #[arg(long)]
    pub fold_beta: bool,
    /// alg3: number of probe rows to sample.
    #[arg(long)]
    pub row_sample: Option<usize>,
    /// alg3: refuse designs with more values than this unless sampling.
    #[arg(long, default_value_t = layermorph::morph::DEFAULT_ALG3_BUDGET)]
    pub alg3_budget: usize,
    /// alg2: outer alternation limit.
    #[arg(long, default_value_t = 50)]
    pub outer_itr: usize,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Training rows used for the regressions.
    #[arg(long, default_value_t = 4096)]
    pub probe_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct MorphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Insertion point: 0 is the input, k is just after the k-th weight layer.
    #[arg(long)]
    pub at: usize,
    #[arg(long, default_value_t = 100)]
    pub width: usize,
    /// Activation of the inserted layer.
    #[arg(long, value_parser = parse_activation, default_value = "relu")]
    pub act: Activation,
    #[arg(long, value_parser = parse_algorithm, default_value = "alg1")]
    pub alg: Algorithm,
    #[command(flatten)]
    pub sparse: SparseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "child.model")]
    pub out: PathBuf,
    /// Report CSV to append to.
    #[arg(long, default_value = "report.csv")]
    pub report: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[arg(long, default_value = "finetuned.model")]
    pub out: PathBuf,
    /// History CSV to append to; defaults to the output path with a .history.csv suffix.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    pub check: Option<String>,
    /// List the checks without running them.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Existing parent; when absent one is trained with --arch and the SGD flags.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch, default_value = "784,64,10")]
    pub arch: Arch,
    #[arg(long, value_parser = parse_activation, default_value = "relu")]
    pub hidden_act: Activation,
    /// Parent training epochs.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub at: usize,
    #[arg(long, default_value_t = 100)]
    pub width: usize,
    #[arg(long, value_parser = parse_activation, default_value = "relu")]
    pub act: Activation,
    /// Comma-separated algorithms to run.
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm, default_value = "alg1,alg2,alg3,baseline")]
    pub algs: Vec<Algorithm>,
    #[command(flatten)]
    pub sparse: SparseArgs,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "desk")]
    pub run_id: String,
    /// Also save the parent and every child and fine-tuned model.
    #[arg(long)]
    pub save_models: bool,
}
