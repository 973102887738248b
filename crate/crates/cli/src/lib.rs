//! Command-line pipeline and labeling service.
//!
//! `simulate → calibrate → train → make-ruler → evaluate`, plus `score` for
//! ad-hoc images and `serve` for the labeling UI's HTTP API.

pub mod commands;
pub mod render;
pub mod server;
pub mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "mriq", version, about = "Artifact-specific MRI quality assessment")]
pub struct Cli {
    /// Root for default artifact paths.
    #[arg(long, env = "MRIQ_DATA_DIR", default_value = ".", global = true)]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with rulers.
    Simulate(SimulateArgs),
    /// Turn calibration picks into calibrated training labels.
    Calibrate(CalibrateArgs),
    /// Train the dual-task network.
    Train(TrainArgs),
    /// Score rulers with a checkpoint and set their thresholds.
    MakeRuler(MakeRulerArgs),
    /// Print raw score, ruler score and pass/fail for images.
    Score(ScoreArgs),
    /// Evaluate a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Serve the labeling API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory (defaults to the data dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Versions per training set, the clean one included.
    #[arg(long, default_value_t = 5)]
    pub mt: usize,
    /// Versions per ruler.
    #[arg(long, default_value_t = 8)]
    pub mr: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 40)]
    pub val: usize,
    #[arg(long, default_value_t = 60)]
    pub test: usize,
    #[arg(long, default_value_t = 5)]
    pub slices_per_subject: usize,
    #[arg(long, default_value_t = 4)]
    pub coils: usize,
    /// Comma-separated scan types such as `knee-fs,brain-nfs`.
    #[arg(long, value_delimiter = ',', default_value = "knee-fs,knee-nfs,brain-fs,brain-nfs")]
    pub scan_types: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Snr,
    BlockDct,
}

impl From<MethodArg> for mriq_core::estimators::Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Snr => Self::Snr,
            MethodArg::BlockDct => Self::BlockDct,
        }
    }
}

/// Where human decisions come from.
#[derive(Debug, Args)]
pub struct LabelSource {
    /// Label store written by `serve`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Use the scripted rater instead of the label store.
    #[arg(long)]
    pub simulate_rater: bool,
    /// Seed of the scripted rater.
    #[arg(long, default_value_t = 0)]
    pub rater_seed: u64,
    /// Only use decisions from this rater.
    #[arg(long)]
    pub rater: Option<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub source: LabelSource,
    /// Calibration strength in (0, 1].
    #[arg(long, default_value_t = 0.85)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::BlockDct)]
    pub method: MethodArg,
    /// The scripted rater labels every n-th slice of a subject.
    #[arg(long, default_value_t = 2)]
    pub label_stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dual,
    Noise,
    Motion,
}

impl From<ModeArg> for mriq_core::network::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dual => Self::Dual,
            ModeArg::Noise => Self::NoiseOnly,
            ModeArg::Motion => Self::MotionOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Dual)]
    pub mode: ModeArg,
    /// Batch order seed.
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 1)]
    pub net_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub trunk_widths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub branch_width: usize,
    /// Train on raw heuristic scores instead of calibrated ones.
    #[arg(long)]
    pub uncalibrated: bool,
    #[arg(long, value_enum, default_value_t = MethodArg::BlockDct)]
    pub method: MethodArg,
}

#[derive(Debug, Args)]
pub struct MakeRulerArgs {
    /// Dataset whose rulers are scored (and whose config builds new ones).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Take rulers from this registry instead of the manifest.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Registry directory to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also build a ruler for this scan type.
    #[arg(long)]
    pub scan_type: Vec<String>,
    #[command(flatten)]
    pub source: LabelSource,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rulers: Option<PathBuf>,
    /// Refuse to fall back to another anatomy's ruler.
    #[arg(long)]
    pub strict: bool,
    /// `.img` files (each with its `.json` sidecar).
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rulers: Option<PathBuf>,
    #[command(flatten)]
    pub source: LabelSource,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Bootstrap seed for the agreement interval.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Ruler registry; defaults to the manifest's rulers.
    #[arg(long)]
    pub rulers: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}
