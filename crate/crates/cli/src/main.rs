//! `mftc`: generate optimal trajectories, train controllers, attack them,
//! measure containment and retrain, all from one versioned JSON config.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mftc_core::lq::benchmark::Scale;
use mftc_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mftc", version, about = "Neural mean-field control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config; keys override the built-in config for `--scale`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; replaces every stage seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "full")]
    pub scale: ScaleArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Smoke,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Smoke => Scale::Smoke,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the training populations and write the dataset.
    Generate,
    /// Train every configured architecture on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Search for an initial state that makes the closed loop diverge.
    Attack {
        #[arg(long)]
        controller: PathBuf,
    },
    /// Containment probabilities for every configured scenario.
    Stability {
        #[arg(long)]
        controller: PathBuf,
    },
    /// Harvest adversarial states, solve from them and retrain.
    Retrain {
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Harvest-and-retrain rounds.
        #[arg(long, default_value_t = 1)]
        rounds: usize,
    },
    /// The full experiment with every report.
    Benchmark,
}

/// 2: contract violation, 3: nonconvergence, 4: I/O.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::NonConvergence(_) | Error::NonFiniteLoss { .. } | Error::DivergedCost => 3,
        Error::Io(_) | Error::File { .. } | Error::Csv(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
