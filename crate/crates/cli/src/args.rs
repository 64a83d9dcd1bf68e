use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use varprop_core::{DropoutConvention, PropagationMode, ReluRule};

/// Sampling-free uncertainty for dropout networks, with an MC dropout reference.
///
/// Every command writes one JSON report to stdout or `--out`.
#[derive(Debug, Parser)]
#[command(name = "varprop", version)]
pub struct Cli {
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense dropout MLP and save it as a model file.
    Train(TrainArgs),
    /// Propagate mean and covariance through a model.
    Propagate(PropagateArgs),
    /// Estimate output moments by MC dropout sampling.
    Mc(McArgs),
    /// MC variance error against the analytic result for several sample counts.
    Compare(CompareArgs),
    /// Time analytic propagation against MC sampling.
    Bench(BenchArgs),
    /// End-to-end experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Synthetic sine regression with in- and out-of-distribution test grids.
    Sine(SineArgs),
    /// Repeated splits with a grid search over dropout rate and tau on a CSV.
    Uci(UciArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Full,
    Diagonal,
}

impl From<Mode> for PropagationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => PropagationMode::Full,
            Mode::Diagonal => PropagationMode::Diagonal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Relu {
    Taylor,
    ExactGaussian,
}

impl From<Relu> for ReluRule {
    fn from(r: Relu) -> Self {
        match r {
            Relu::Taylor => ReluRule::Taylor,
            Relu::ExactGaussian => ReluRule::ExactGaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Convention {
    Standard,
    Inverted,
}

impl From<Convention> for DropoutConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Standard => DropoutConvention::Standard,
            Convention::Inverted => DropoutConvention::Inverted,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Form {
    Full,
    Diagonal,
}

/// Model plus one input, given inline or as a file.
#[derive(Debug, Args)]
pub struct ModelInput {
    /// Model file in the JSON layer format.
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated input values, flattened in row-major order.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "input_file", required_unless_present = "input_file")]
    pub input: Option<String>,
    /// File holding the input as a JSON array (nested allowed) or comma/whitespace separated numbers.
    #[arg(long)]
    pub input_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training CSV with a header row.
    #[arg(long, required_unless_present = "sine", conflicts_with = "sine")]
    pub data: Option<PathBuf>,
    /// Target column names; every other column is an input.
    #[arg(long, value_delimiter = ',', required_unless_present = "sine")]
    pub targets: Vec<String>,
    /// Train on this many generated sine samples instead of a CSV.
    #[arg(long)]
    pub sine: Option<usize>,
    /// Layers, e.g. `dense:50,relu,dropout:0.1,dense:1`.
    #[arg(long)]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = Convention::Standard)]
    pub convention: Convention,
    /// Z-normalize inputs and targets; the statistics go into the report.
    #[arg(long)]
    pub normalize: bool,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to save the trained model.
    #[arg(long)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub target: ModelInput,
    #[arg(long, value_enum, default_value_t = Mode::Diagonal)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Relu::Taylor)]
    pub relu_rule: Relu,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub target: ModelInput,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Form::Diagonal)]
    pub form: Form,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub target: ModelInput,
    /// Sample counts.
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000,10000")]
    pub samples: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent MC runs averaged per sample count.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Relu::Taylor)]
    pub relu_rule: Relu,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub target: ModelInput,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50,100")]
    pub samples: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SineArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 100)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    #[arg(long, value_enum, default_value_t = Convention::Standard)]
    pub convention: Convention,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 10_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 200)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 50)]
    pub ood_points: usize,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Relu::Taylor)]
    pub relu_rule: Relu,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also save the trained network (it expects standardized inputs; see the report config).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UciArgs {
    /// Regression CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column name.
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 20)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.05,0.1")]
    pub rates: Vec<f64>,
    /// Observation precisions; defaults to a grid scaled to the target spread.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = Convention::Standard)]
    pub convention: Convention,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long, default_value_t = 10_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 10_000)]
    pub tll_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}
