mod compare;
mod plot;
mod run;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable naming the default results root.
pub const RESULTS_ENV: &str = "DCLAB_RESULTS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] dclab::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Runtime(dclab::Error::Config(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "dclab", about = "Continual personalization experiments on toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a method over a concept sequence and write its artifacts.
    Run {
        /// JSON run configuration.
        config: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Results root (overrides the config and $DCLAB_RESULTS).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured method.
        #[arg(long)]
        method: Option<String>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
        /// Seeds trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Tabulate and plot completed runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output directory for the table and plots (default: <results root>/compare).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `$DCLAB_RESULTS`, falling back to `./results`.
pub fn results_root() -> PathBuf {
    std::env::var_os(RESULTS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, seed, out, method, dry_run, jobs } => {
            run::run(&run::RunArgs { config, seed, out, method, dry_run, jobs })
        }
        Command::Compare { dirs, out } => compare::compare(&dirs, out.unwrap_or_else(|| results_root().join("compare"))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
