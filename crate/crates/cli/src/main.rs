//! `glioma`: phantom generation, training, inference, evaluation and
//! gradient checking from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glioma_core::Error;

use settings::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "glioma", version, about = "Volumetric glioma segmentation and grading on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with a stratified train/val manifest.
    PhantomGen(PhantomGenArgs),
    /// Train the segmentation network.
    TrainSeg(TrainArgs),
    /// Train the grading network on segmenter-masked inputs.
    TrainCls(TrainClsArgs),
    /// Score a predictions table against the manifest's labels and masks.
    Evaluate(EvaluateArgs),
    /// Write predicted masks and grade probabilities for a manifest.
    Predict(PredictArgs),
    /// Write attention masks of a trained network as volumes.
    ExportAttention(ExportAttentionArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct PhantomGenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cases, split between grades in the 259:76 cohort ratio.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without improvement before stopping, or `none`.
    #[arg(long)]
    pub patience: Option<String>,
    /// Stop once the validation metric reaches this value, or `none`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Split used for validation: `val`, or `train` for overfit runs.
    #[arg(long)]
    pub val_split: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainClsArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Trained segmenter checkpoint.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Predictions table written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
    /// Grading checkpoint; without it only masks are predicted.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `train`, `val` or `all`.
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Segmenter or grading checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Segmenter feeding a grading checkpoint.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    /// Export at most this many cases (0 = all).
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Only run cases whose `module/op` name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
    /// Also write gradcheck.csv and the config echo here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn classify_error(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => (EXIT_USAGE, "config"),
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. } | Error::Backward(_) => {
            (EXIT_NUMERIC, "numeric")
        }
        Error::Io { .. } | Error::Format(_) | Error::Data(_) | Error::ShapeMismatch { .. } => (EXIT_DATA, "data"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::PhantomGen(a) => commands::phantom_gen(a),
        Command::TrainSeg(a) => commands::train_seg(a),
        Command::TrainCls(a) => commands::train_cls(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::ExportAttention(a) => commands::export_attention(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify_error(&e);
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}
