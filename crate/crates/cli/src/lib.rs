//! `fieldseg` command line: synthesize, split, train, evaluate, predict and
//! report, each reading and writing plain files under `--out`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fieldseg", version, about = "Field-scale crop segmentation on embedding chips")]
pub struct Cli {
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-class dataset with a known Bayes accuracy.
    SynthGen(SynthGenArgs),
    /// Assign chips to train/val/test by spatial blocks.
    Split(SplitArgs),
    /// Train the U-Net and keep the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Monte Carlo dropout prediction with uncertainty maps.
    Predict(PredictArgs),
    /// Summarize prediction rasters already on disk.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 400)]
    pub chips: usize,
    /// Euclidean distance between the class signatures.
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    /// Per-band noise standard deviation.
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    /// Chip side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub edge_mix: usize,
    #[arg(long, default_value_t = 2)]
    pub margin: usize,
    #[arg(long, default_value_t = 0.5)]
    pub irregularity: f64,
    /// Grid spacing between chip centroids, in meters.
    #[arg(long, default_value_t = 5000.0)]
    pub spacing: f64,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated ratios".to_string())
}

fn parse_bands(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected three comma-separated band indices".to_string())
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_ratios)]
    pub ratios: [f64; 3],
    /// Block edge length in meters.
    #[arg(long, default_value_t = 5000.0)]
    pub block: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 24)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub base_width: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    /// Disable batch normalization.
    #[arg(long)]
    pub no_norm: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accepted and ignored; training always runs in full precision.
    #[arg(long)]
    pub mixed_precision: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stochastic forward passes per chip.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub passes: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Predict one chip instead of a whole split.
    #[arg(long)]
    pub chip: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 2)]
    pub edge_distance: usize,
    /// Bands rendered as red, green, blue in the preview.
    #[arg(long, default_value = "0,1,2", value_parser = parse_bands)]
    pub bands: [usize; 3],
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Checkpoint whose architecture is summarized.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 2)]
    pub edge_distance: usize,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

/// Failure of a command, mapped onto an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(fieldseg::Error),
}

impl From<fieldseg::Error> for CliError {
    fn from(e: fieldseg::Error) -> Self {
        CliError::Data(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr, the summary to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if cli.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match commands::dispatch(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("fieldseg: {e}");
            e.exit_code()
        }
    }
}
