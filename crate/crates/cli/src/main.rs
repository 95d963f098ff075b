//! `specdec-lab`: train draft heads, simulate speculative decoding, benchmark
//! head latency, evaluate the speedup model and collect token statistics.

mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use specdec_lab::LabError;

use output::{now, write_json, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "specdec-lab",
    version,
    about = "Draft LM-head laboratory for speculative decoding"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a drafter on a toy target with forward KL.
    Train(commands::TrainArgs),
    /// Run speculative decoding rounds and report acceptance.
    Simulate(commands::SimulateArgs),
    /// Measure head forward latency over a grid.
    Bench(commands::BenchArgs),
    /// Speedup-model plane, break-even thresholds and reference crosscheck.
    Perfmodel(commands::PerfmodelArgs),
    /// Token-frequency statistics and truncated vocabularies.
    Freqstats(commands::FreqstatsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Simulate(_) => "simulate",
            Command::Bench(_) => "bench",
            Command::Perfmodel(_) => "perfmodel",
            Command::Freqstats(_) => "freqstats",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or paths: exit 2.
    Config(String),
    /// Numerical failure inside a computation: exit 3.
    Numeric(String),
    /// The command ran but a check it performs failed: exit 1.
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::CheckFailed(m) => m,
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

/// Parsed config, or the type's defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Directory relative checkpoint paths in a config resolve against.
pub fn config_dir(global: &GlobalArgs) -> PathBuf {
    global
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// Validates `SPECDEC_LAB_THREADS`. Every command currently runs on one
/// worker, which satisfies any cap.
fn check_threads() -> Result<(), CliError> {
    match std::env::var("SPECDEC_LAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(CliError::Config(format!(
                "SPECDEC_LAB_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(()),
    }
}

/// What a command reports back for the manifest.
pub struct Done {
    pub seed: u64,
    /// Set when the outputs were written but a check they carry failed.
    pub failed_check: Option<String>,
}

pub struct Progress {
    quiet: bool,
}

impl Progress {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    check_threads()?;
    let started_at = now();
    let g = &cli.global;
    std::fs::create_dir_all(&g.out).map_err(|e| output::io_err(&g.out, e))?;
    let progress = Progress { quiet: g.quiet };
    let outcome = match &cli.command {
        Command::Train(a) => commands::train(g, a, &progress),
        Command::Simulate(a) => commands::simulate(g, a, &progress),
        Command::Bench(a) => commands::bench(g, a, &progress),
        Command::Perfmodel(a) => commands::perfmodel(g, a, &progress),
        Command::Freqstats(a) => commands::freqstats(g, a, &progress),
    };
    let done = outcome?;
    write_json(
        &g.out.join("run.json"),
        &RunManifest {
            command: cli.command.name().to_string(),
            config_path: g.config.clone(),
            output_dir: g.out.clone(),
            seed: done.seed,
            started_at,
            finished_at: now(),
            artifact_version: specdec_lab::ARTIFACT_VERSION.to_string(),
        },
    )?;
    match done.failed_check {
        Some(msg) => Err(CliError::CheckFailed(msg)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
