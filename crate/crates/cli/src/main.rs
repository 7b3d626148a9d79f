mod commands;
mod log;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semalign::ErrorKind;

#[derive(Parser)]
#[command(name = "semalign", version, about = "Semi-supervised gland segmentation with semantic alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled/unlabeled split of the training images.
    Split(SplitArgs),
    /// Generate a synthetic gland dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(EvalArgs),
    /// Train and evaluate every variant of an ablation grid.
    Ablate(AblateArgs),
    /// Render prediction overlays.
    Overlay(OverlayArgs),
}

#[derive(Args)]
pub struct SplitArgs {
    /// Dataset root with images/train.
    #[arg(long, env = "SEMALIGN_DATA_ROOT")]
    pub root: PathBuf,
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub n_train: usize,
    #[arg(long, default_value_t = 20)]
    pub n_test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Config files, later ones overriding earlier ones.
    #[arg(long = "config")]
    pub configs: Vec<PathBuf>,
    /// `dotted.key=value` overrides applied after the files.
    #[arg(long = "override", short = 'o')]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Split manifest; without it every training image is labeled.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, env = "SEMALIGN_DATA_ROOT")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Evaluate on the test split every N epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Stop after this many steps (the schedule still spans all epochs).
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SEMALIGN_DATA_ROOT")]
    pub data: PathBuf,
    /// Dataset split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// single | sliding; defaults to the checkpoint's setting.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub oracle: bool,
    /// Labeled-ratio column of the report.
    #[arg(long, default_value = "-")]
    pub ratio: String,
    /// Method column of the report.
    #[arg(long, default_value = "semalign")]
    pub method: String,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// branches | tokens | align-loss | encoder
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, env = "SEMALIGN_DATA_ROOT")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value = "-")]
    pub ratio: String,
}

#[derive(Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root holding the images to render.
    #[arg(long, env = "SEMALIGN_DATA_ROOT")]
    pub images: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the ground truth as the prediction.
    #[arg(long)]
    pub oracle: bool,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Split(a) => commands::split(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Overlay(a) => commands::overlay(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error(&e);
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
