//! `canids`: synthesize CAN traffic, train and lower the quantised IDS model,
//! evaluate, benchmark and replay it.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "canids",
    version,
    about = "Quantised-MLP intrusion detection for CAN traffic"
)]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// FIFO window length in frames (defaults to 4, or the model's window).
    #[arg(long, global = true)]
    pub window: Option<usize>,

    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Abort on the first malformed log record instead of skipping it.
    #[arg(long, global = true)]
    pub strict: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labelled log with injected attack traffic.
    Synth(SynthArgs),
    /// Quantisation-aware training on a log; writes a checkpoint.
    Train(TrainArgs),
    /// Lower a checkpoint to the integer threshold model.
    Lower(LowerArgs),
    /// Accuracy metrics of a lowered model on a log.
    Eval(EvalArgs),
    /// Per-message latency and throughput of a lowered model.
    Bench(BenchArgs),
    /// Stream a log through the two-stage ingestion/inference pipeline.
    Replay(ReplayArgs),
    /// Train one model per bit width and compare holdout F1.
    Dse(DseArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackArg {
    Dos,
    Fuzzy,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Dos,
    Fuzzy,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output log path.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = AttackArg::Dos)]
    pub attack: AttackArg,
    /// Injected frames per second (default: 2000 for DoS, 250 for fuzzy).
    #[arg(long)]
    pub rate: Option<f64>,
    /// Capture length in seconds.
    #[arg(long, default_value_t = 20.0)]
    pub duration: f64,
    /// Attack start, seconds (default: 10% of the duration).
    #[arg(long)]
    pub attack_start: Option<f64>,
    /// Attack stop, seconds (default: 90% of the duration).
    #[arg(long)]
    pub attack_stop: Option<f64>,
    /// JSON traffic profile replacing the built-in ten-identifier profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 32])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Fraction of windows (chronologically first) used for training.
    #[arg(long, default_value_t = 0.7)]
    pub split: f64,
    /// Epochs during which activation ranges are observed.
    #[arg(long, default_value_t = 1)]
    pub observer_epochs: usize,
    /// Disable inverse-frequency class weighting.
    #[arg(long)]
    pub no_class_weighting: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    /// Output checkpoint path.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Attack the model is trained to detect.
    #[arg(long, value_enum, default_value_t = ModelKind::Dos)]
    pub attack: ModelKind,
    /// Weight and activation bit width.
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct LowerArgs {
    pub checkpoint: PathBuf,
    /// Output lowered-model path.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Random inputs checked for class agreement before writing.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Score only the chronologically last fraction of windows.
    #[arg(long, default_value_t = 1.0)]
    pub holdout: f64,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    pub model: PathBuf,
    /// Log to replay; a synthetic DoS stream is generated when omitted.
    pub dataset: Option<PathBuf>,
    /// Number of messages (synthetic stream length, or cap on the log).
    #[arg(long, default_value_t = 100_000)]
    pub messages: usize,
    /// Contexts for the separate throughput mode (1 = latency run only).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Playback speed relative to capture time; 0 = as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    pub speed: f64,
    /// Depth of the ingestion → inference queue.
    #[arg(long, default_value_t = 64)]
    pub queue: usize,
    /// Per-message verdict log (CSV).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DseArgs {
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2u32, 3, 4, 8])]
    pub bits: Vec<u32>,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
