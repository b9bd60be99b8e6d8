use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use mtle_core::corpus::synth::Scenario;
use mtle_core::matcher::{LossMode, MatcherForm, Metric};

#[derive(Debug, Parser)]
#[command(name = "mtle", version, about = "Multi-task label-embedding text classification")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train skip-gram word vectors on raw text or task files.
    EmbedTrain(EmbedTrainArgs),
    /// Train a model on one or more task files.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task file.
    Eval(EvalArgs),
    /// Add a task to a trained checkpoint.
    AddTask(AddTaskArgs),
    /// Run the pairwise multi-task ablation.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write synthetic task files.
    Synth(SynthArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random stream; falls back to the config file, then MTLE_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key=value file whose keys mirror the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to --out, else stderr).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run every data-parallel loop sequentially.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Hyper {
    /// Word-vector dimension.
    #[arg(long = "d")]
    pub embed_dim: Option<usize>,
    /// LSTM hidden size.
    #[arg(long = "m")]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate becomes lr / (1 + lr_decay * epoch).
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// L2 regularization weight.
    #[arg(long)]
    pub reg: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
    /// literal | one-vs-rest
    #[arg(long)]
    pub loss: Option<LossMode>,
    /// interaction | concat
    #[arg(long)]
    pub matcher: Option<MatcherForm>,
    /// Rescale the step gradient to at most this norm.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Share one lookup table between inputs and labels.
    #[arg(long)]
    pub tie_lookups: Option<bool>,
    #[arg(long)]
    pub matcher_bias: Option<bool>,
    /// Minimum token count for the vocabulary.
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Per-task loss weight as task=weight, overriding the task file.
    #[arg(long = "task-weight", value_name = "TASK=W")]
    pub task_weights: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EmbedTrainArgs {
    /// Plain text (one sentence per line) or task files.
    #[arg(long = "corpus", required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Unsupervised matching with averaged word vectors.
    Model1,
    /// Supervised label-embedding network.
    Model2,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "task", required = true)]
    pub tasks: Vec<PathBuf>,
    /// Checkpoint path (required for model2).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the per-epoch metric lines here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Model2)]
    pub mode: Mode,
    /// Similarity for model1: cosine | l2
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    /// Word vectors used to initialise both lookup tables.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Re-split each task's training data into this many folds.
    #[arg(long, requires = "fold")]
    pub folds: Option<usize>,
    /// Held-out fold index used as the test split.
    #[arg(long, requires = "folds")]
    pub fold: Option<usize>,
    #[command(flatten)]
    pub hyper: Hyper,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: mtle_core::corpus::Split,
    /// Score an unregistered task from its label phrases alone.
    #[arg(long)]
    pub zero_shot: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("regime").required(true).args(["hot", "cold"])))]
pub struct AddTaskArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Keep the parameters and train on the new task only.
    #[arg(long)]
    pub hot: bool,
    /// Retrain from scratch on all tasks.
    #[arg(long)]
    pub cold: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Files for the registered tasks (default: the paths recorded in the checkpoint).
    #[arg(long = "old-task")]
    pub old_tasks: Vec<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long = "task", required = true)]
    pub tasks: Vec<PathBuf>,
    /// Print the gain matrix as CSV.
    #[arg(long)]
    pub csv: bool,
    /// Also write the CSV matrix here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the independent trainings concurrently.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub hyper: Hyper,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stencil {
    /// Two-step Richardson extrapolation of central differences.
    Richardson,
    /// Plain central difference.
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossChoice {
    Both,
    Literal,
    OneVsRest,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long = "d", default_value_t = 8)]
    pub embed_dim: usize,
    #[arg(long = "m", default_value_t = 6)]
    pub hidden_size: usize,
    /// Number of labels.
    #[arg(long = "c", default_value_t = 3)]
    pub labels: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    /// Comma-separated sequence lengths.
    #[arg(long, short = 't', value_delimiter = ',', default_value = "5")]
    pub lengths: Vec<usize>,
    /// Comma-separated seeds (default: --seed, else 0).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = Stencil::Richardson)]
    pub stencil: Stencil,
    #[arg(long, value_enum, default_value_t = LossChoice::Both)]
    pub loss: LossChoice,
    #[arg(long, default_value_t = MatcherForm::Interaction)]
    pub matcher: MatcherForm,
    #[arg(long, default_value_t = 0.5)]
    pub init_std: f64,
    /// Double one analytic gradient entry of this tensor.
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Print every tensor of every case.
    #[arg(long)]
    pub full: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = Scenario::Domain)]
    pub scenario: Scenario,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub tasks: usize,
    #[arg(long, default_value_t = 200)]
    pub train_size: usize,
    /// Test examples per task (default: max(train size, 100)).
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Index of the first generated task, for adding related tasks later.
    #[arg(long, default_value_t = 0)]
    pub first_task: usize,
    #[arg(long)]
    pub keywords_per_label: Option<usize>,
    #[arg(long)]
    pub label_leak: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Skip the input digest comparison.
    #[arg(long)]
    pub ignore_digests: bool,
}
