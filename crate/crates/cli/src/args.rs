use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "tdir", version, about = "Time-direction pretraining for windowed multichannel time courses")]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Pretrain on the forward-vs-reversed pretext task.
    Pretrain(PretrainArgs),
    /// Fine-tune on class labels (PTR from a checkpoint, NPT from scratch).
    Finetune(FinetuneArgs),
    /// Subjects-per-class sweep over both arms.
    Sweep(SweepArgs),
    /// Finite-difference check of every primitive and a reduced model.
    Gradcheck(GradcheckArgs),
    /// Summaries, arm comparisons and box plots from per-run CSVs.
    Report(ReportArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Sweep(_) => "sweep",
            Command::Gradcheck(_) => "gradcheck",
            Command::Report(_) => "report",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 53)]
    pub components: usize,
    #[arg(long, default_value_t = 140)]
    pub timepoints: usize,
    #[arg(long, default_value_t = 10)]
    pub subjects_per_class: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Per-class AR coefficients `a1:a2`, comma separated.
    #[arg(long, default_value = "0.6:0.2,0.3:0.4")]
    pub ar: String,
    #[arg(long, default_value_t = 1.5)]
    pub asymmetry: f64,
    #[arg(long, default_value_t = 0.1)]
    pub jump_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Linear Gaussian dynamics: a time-reversible process.
    #[arg(long)]
    pub gaussian_only: bool,
    #[arg(long, default_value_t = 0.05)]
    pub mixing_density: f64,
    #[arg(long, default_value_t = 0.3)]
    pub mixing_weight: f64,
    #[arg(long, default_value_t = 3.0)]
    pub driver_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub mixing_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub window_len: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Parallel training runs (k-fold and sweeps).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Architecture in canonical `key=value` form; `components` and
    /// `window_len` are taken from the data and `--window-len`.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Normalize::Zscore)]
    pub normalize: Normalize,
}

#[derive(ValueEnum, Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    /// Per-component z-score over each subject's time course.
    Zscore,
    None,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SplitFlags {
    /// Validation holdout size in subjects (default: 15% of the dataset).
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Test holdout size in subjects (default: 15% of the dataset).
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Seed for holdouts, folds and subsampling (default: --seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub split: SplitFlags,
}

#[derive(ValueEnum, Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    None,
    /// Keep the minority class and a rotating block of the majority class.
    Rotate,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `scratch` or a checkpoint path.
    #[arg(long, default_value = "scratch")]
    pub init: String,
    /// Keep the checkpoint's output layer instead of redrawing it.
    #[arg(long)]
    pub keep_head: bool,
    #[arg(long, value_enum, default_value_t = Balance::None)]
    pub balance: Balance,
    #[arg(long, default_value_t = 0)]
    pub trial: usize,
    /// Train on this many subjects per class from the training pool.
    #[arg(long)]
    pub subjects_per_class: Option<usize>,
    /// Folds over the training pool; 1 trains once on the whole pool.
    #[arg(long, default_value_t = 1)]
    pub folds: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub split: SplitFlags,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pretext checkpoint for the PTR arm; NPT always starts from scratch.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "15,25,50")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Dataset tag in the result files (default: the data directory name).
    #[arg(long)]
    pub tag: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub split: SplitFlags,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random input points per primitive.
    #[arg(long, default_value_t = 3)]
    pub points: usize,
    /// Relative-error threshold.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Write the report and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test hook: break the backward pass of one op.
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

#[derive(ValueEnum, Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    Dataset,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ReportArgs {
    /// Per-run CSV files.
    #[arg(long = "runs", required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow several dataset tags, one plot each.
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
