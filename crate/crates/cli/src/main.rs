//! `melgraph` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 data error
//! (unreadable or malformed inputs, numerical failure), 3 a gradient check
//! that ran but did not pass.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<melgraph::Error> for CliError {
    fn from(e: melgraph::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "melgraph", version, about = "Mel-graph transformer for underwater acoustic target recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every command accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cache feature grids for every segment of a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// mel, mfcc or stft.
        #[arg(long)]
        kind: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Windowed Gaussianity and linearity tests of one WAV file.
    Hinich {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "window-s")]
        window_s: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a labeled synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Preset name or a JSON file of class specs.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "n-per-class")]
        n_per_class: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoints and history.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// shipsear, deepship or small.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Class probabilities for every 5 s segment of a WAV file.
    Predict {
        wav: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every primitive and a small network.
    Gradcheck {
        /// default or tiny.
        #[arg(long)]
        preset: Option<String>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Attention maps or graph neighborhoods of one segment as CSV.
    Export {
        wav: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// attention or graph.
        #[arg(long)]
        kind: Option<String>,
        /// 1-based block.
        #[arg(long)]
        block: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MELGRAPH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MELGRAPH_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    use commands as c;
    match cli.command {
        Command::Featurize { manifest, out, kind, common } => c::featurize(&manifest, &out, kind, &common),
        Command::Hinich { wav, out, window_s, common } => c::hinich(&wav, &out, window_s, &common),
        Command::Synth { out, preset, n_per_class, common } => c::synth(&out, preset, n_per_class, &common),
        Command::Train { manifest, out, preset, epochs, common } => c::train(&manifest, &out, preset, epochs, &common),
        Command::Eval { checkpoint, manifest, out, split, common } => c::eval(&checkpoint, &manifest, &out, split, &common),
        Command::Predict { wav, checkpoint, out, common } => c::predict(&wav, &checkpoint, out.as_deref(), &common),
        Command::Gradcheck { preset, out, common } => c::gradcheck(preset, out.as_deref(), &common),
        Command::Export { wav, checkpoint, out, kind, block, common } => {
            c::export(&wav, &checkpoint, &out, kind, block, &common)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
