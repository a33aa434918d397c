//! `sysgen` — batch pipeline that equips SFT conversation datasets with
//! generated, verified system messages.
//!
//! Exit codes are a public contract: 0 success, 1 I/O failure, 2
//! configuration or usage error, 3 validation findings. An interrupt
//! (Ctrl-C) flushes the checkpoint and exits with 130.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::BackendKind;

pub const EXIT_INTERRUPTED: u8 = 130;

#[derive(Debug)]
pub enum CliError {
    /// Configuration or usage problem; exits 2.
    Usage(String),
    /// I/O or backend failure; exits 1.
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(message) | CliError::Io(message) => f.write_str(message),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Io(_) => ExitCode::from(1),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sysgen", version, about = "Generate, verify, and apply system messages for SFT datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline end to end (phases 1-4) over a dataset.
    Run(RunFlags),
    /// Run a phase span against an existing run directory (requires --phase).
    Phase(RunFlags),
    /// Check a dataset file and list every problem with its line number.
    Validate(ValidateFlags),
    /// Print the accounting report for a run directory.
    Stats(StatsFlags),
    /// Compare regenerated answers against originals with a judge model.
    Judge(JudgeFlags),
}

/// Flags shared by `run` and `phase`. Values from `--config` apply first;
/// any flag given here wins over the file.
#[derive(Debug, Default, Args)]
pub struct RunFlags {
    /// JSON settings file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Input dataset (JSONL), one conversation per line.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Run directory for intermediates and the report.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Generator model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Judge model name; defaults to the generator (self-feedback).
    #[arg(long)]
    pub judge_model: Option<String>,
    /// Backend base URL for `--backend http`.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Which backend answers requests.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Script file for `--backend mock`.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Concurrent in-flight records.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Sampling seed; `judge` requires one for reproducible samples.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phase span to execute, e.g. `1..4`, `2..3`, or `3`.
    #[arg(long, value_name = "RANGE")]
    pub phase: Option<String>,
    /// Render the first record's prompts and exit without any backend call.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
struct ValidateFlags {
    /// Dataset file to check.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct StatsFlags {
    /// Run directory holding phase files and report.json.
    run_dir: PathBuf,
}

#[derive(Debug, Args)]
struct JudgeFlags {
    /// Run directory with a finished phase4 file.
    run_dir: PathBuf,
    /// Sample size.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[command(flatten)]
    run: RunFlags,
}

#[tokio::main]
async fn main() -> ExitCode {
    init_tracing();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(flags) => commands::cmd_run(flags, false).await,
        Command::Phase(flags) => commands::cmd_run(flags, true).await,
        Command::Validate(flags) => commands::cmd_validate(&flags.input),
        Command::Stats(flags) => commands::cmd_stats(&flags.run_dir),
        Command::Judge(flags) => commands::cmd_judge(&flags.run_dir, flags.k, flags.run).await,
    };
    match result {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            error.exit_code()
        }
    }
}

fn init_tracing() {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}
