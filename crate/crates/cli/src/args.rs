use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use segfield::train::InputMode;
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "segfield", version, about = "Implicit pulmonary-segment reconstruction on phantom data")]
pub struct Cli {
    /// Base directory; every relative path is resolved against it.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Generate phantom subject bundles and a train/val/test split.
    Phantom(PhantomArgs),
    /// Fit the template generator to the training label maps.
    Pretrain(PretrainArgs),
    /// Train encoder and point head against a frozen template.
    Train(TrainArgs),
    /// Dense prediction at an arbitrary output resolution.
    Infer(InferArgs),
    /// Dice, surface Dice and intrusion metrics for predictions.
    Eval(EvalArgs),
    /// Voxel-face OBJ surfaces and CSV metric tables.
    Export(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Export(_) => "export",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomArgs {
    /// Number of subjects.
    #[arg(long)]
    pub n: usize,
    /// Cubic grid edge in voxels.
    #[arg(long, default_value_t = 48)]
    pub dims: usize,
    /// Seed of the first subject; subject i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub lobes: usize,
    #[arg(long, default_value_t = 2)]
    pub segments: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 1.2)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value = "phantoms")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Dataset root holding subject bundles.
    #[arg(long)]
    pub data: PathBuf,
    /// Split file; defaults to `split.json` under the dataset root.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to the number of training subjects.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON template architecture; defaults to the built-in desk-scale one.
    #[arg(long)]
    pub template_config: Option<PathBuf>,
    #[arg(long, default_value = "template")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// One of I, IBAV, L, LBAV.
    #[arg(long, default_value = "IBAV")]
    pub input_mode: InputMode,
    /// Points sampled per subject and step.
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    /// Fraction of points drawn uniformly; the rest come from the trees.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_def: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pretrained template checkpoint; a random template is used without it.
    #[arg(long)]
    pub template_ckpt: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Training run directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Checkpoint file inside the run directory.
    #[arg(long, default_value = "best.snn")]
    pub ckpt: String,
    /// A single subject bundle.
    #[arg(long, conflicts_with = "data")]
    pub subject: Option<PathBuf>,
    /// Dataset root; predicts every test subject of the split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub split: Option<PathBuf>,
    /// Cubic output grid edge; defaults to the subject grid.
    #[arg(long)]
    pub out_dims: Option<usize>,
    #[arg(long, default_value = "pred")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Ground-truth subject bundle.
    #[arg(long, conflicts_with = "data")]
    pub gt: Option<PathBuf>,
    /// Prediction SVOL, or a directory of `<subject>.svol` files with `--data`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub split: Option<PathBuf>,
    /// Surface tolerance in voxels.
    #[arg(long, default_value_t = segfield::metrics::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Label SVOL to mesh, one OBJ per class.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Metric report JSON files to tabulate.
    #[arg(long, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "export")]
    pub out: PathBuf,
}
