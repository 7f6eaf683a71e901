//! Command-line front end: phantom generation, training, prediction,
//! evaluation and threshold tuning.

pub mod commands;
pub mod dataset;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tcupgan_core::components::Connectivity;
use tcupgan_core::metrics::Hd95Mode;
use tcupgan_core::training::LrDecay;

pub use commands::run;
pub use dataset::VolumeFormat;

#[derive(Debug, Parser)]
#[command(name = "tcupgan", version, about = "ConvLSTM U-Net GAN for brain tumour segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic multi-modal volumes with nested tumour labels.
    MakePhantoms(MakePhantomsArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Segment volumes with a trained generator.
    Predict(PredictArgs),
    /// Lesion-wise Dice and HD95 of predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Search the small-region rejection thresholds on validation data.
    TuneThresholds(TuneArgs),
    /// Print the layer table and parameter counts of a configuration.
    Describe(DescribeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "6")]
    Six,
    #[value(name = "26")]
    TwentySix,
}

impl From<ConnectivityArg> for Connectivity {
    fn from(c: ConnectivityArg) -> Self {
        match c {
            ConnectivityArg::Six => Connectivity::Six,
            ConnectivityArg::TwentySix => Connectivity::TwentySix,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LrDecayArg {
    /// Raise the rate to the decay exponent every few epochs.
    PaperExponent,
    Multiplicative,
    Constant,
}

impl From<LrDecayArg> for LrDecay {
    fn from(m: LrDecayArg) -> Self {
        match m {
            LrDecayArg::PaperExponent => LrDecay::PowerOfRate,
            LrDecayArg::Multiplicative => LrDecay::Multiplicative,
            LrDecayArg::Constant => LrDecay::Constant,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Hd95ModeArg {
    Pooled,
    MaxDirected,
}

impl From<Hd95ModeArg> for Hd95Mode {
    fn from(m: Hd95ModeArg) -> Self {
        match m {
            Hd95ModeArg::Pooled => Hd95Mode::Pooled,
            Hd95ModeArg::MaxDirected => Hd95Mode::MaxDirected,
        }
    }
}

#[derive(Debug, Args)]
pub struct MakePhantomsArgs {
    /// Resolved configuration from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Depth, height and width, e.g. `8,32,32`. Tumour radii scale with it.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON), either bare or the `train.config.json` of an
    /// earlier run; defaults apply to anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with a manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Start from the weights of this checkpoint.
    #[arg(long)]
    pub init_weights: Option<PathBuf>,
    /// Fine-tune at the constant transfer learning rate.
    #[arg(long)]
    pub transfer: bool,
    /// Continue a run from one of its checkpoints.
    #[arg(long, conflicts_with_all = ["init_weights", "transfer"])]
    pub resume: Option<PathBuf>,
    /// Generator adversarial term against the "fake" label.
    #[arg(long)]
    pub literal_lfake: bool,
    /// Train the generator on the segmentation loss alone.
    #[arg(long)]
    pub no_adversarial: bool,
    #[arg(long, value_enum)]
    pub lr_decay: Option<LrDecayArg>,
    /// In-plane size the volumes are resized to; `native` keeps them.
    #[arg(long)]
    pub target_hw: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Preset name (gli, men, ped, ssa), three comma-separated areas, or a
    /// JSON file written by `tune-thresholds`.
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub min_span: Option<usize>,
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
    #[arg(long, value_enum)]
    pub format: Option<VolumeFormat>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `predict`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Dataset directory holding the ground-truth labels.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
    #[arg(long)]
    pub dilation: Option<usize>,
    #[arg(long)]
    pub penalty: Option<f64>,
    #[arg(long, value_enum)]
    pub hd95_mode: Option<Hd95ModeArg>,
    /// Histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Internal validation set with labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate areas, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_span: Option<usize>,
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// Run configuration or checkpoint; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the layer table as JSON.
    #[arg(long)]
    pub json: bool,
}

/// Process exit status for an error: 2 for bad input or configuration,
/// 3 for numeric divergence, 4 for I/O and file-format problems.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use tcupgan_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. } => 3,
                E::Io(_) | E::Nifti(_) | E::Format { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}
