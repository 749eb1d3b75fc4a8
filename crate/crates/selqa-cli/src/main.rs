//! Command-line driver for the selective answering pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selqa::config::{load_config, RunConfig};
use selqa::error::Error;
use selqa::pipeline::{Command, Pipeline};

#[derive(Parser)]
#[command(
    name = "selqa",
    about = "Train uncertainty-aware classifier variants and evaluate them on selective answering",
    version
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory override (runs land in <out>/<run-id>/).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for example-level parallelism (0 = default pool).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Overwrite existing stage artifacts.
    #[arg(long, global = true)]
    force: bool,

    /// Fit selection thresholds on the evaluated set itself instead of
    /// the held-out calibration split.
    #[arg(long, global = true)]
    self_calibrate: bool,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Generate the synthetic dataset and its splits.
    GenData,
    /// Pretrain the base model, convert and refine every method.
    Train,
    /// Score the calibration and test splits with every method.
    Evaluate,
    /// Fit thresholds across the percentile grid and emit tables/plots.
    Sweep,
    /// Benchmark parameter counts and inference time per method.
    Bench,
    /// Emit token-level uncertainty traces (generative tasks).
    Trace,
    /// Run the full pipeline: gen-data, train, evaluate, sweep, bench.
    All,
}

impl CliCommand {
    fn inner(&self) -> Command {
        match self {
            CliCommand::GenData => Command::GenData,
            CliCommand::Train => Command::Train,
            CliCommand::Evaluate => Command::Evaluate,
            CliCommand::Sweep => Command::Sweep,
            CliCommand::Bench => Command::Bench,
            CliCommand::Trace => Command::Trace,
            CliCommand::All => Command::All,
        }
    }
}

/// Exit 2 marks configuration/validation problems, 1 runtime failures.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::MissingArtifact(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (config, seed_override) = match &cli.config {
        Some(path) => load_config(path)?,
        None => {
            let mut config = RunConfig::default();
            let mut override_seed = None;
            if let Ok(env_seed) = std::env::var("SELQA_SEED") {
                let seed: u64 = env_seed.parse().map_err(|_| {
                    Error::InvalidConfig(vec![format!("SELQA_SEED: not an integer: {env_seed}")])
                })?;
                config.seed = seed;
                config.task.seed = seed;
                override_seed = Some(seed);
            }
            (config, override_seed)
        }
    };
    if let Some(seed) = seed_override {
        eprintln!("seed overridden by SELQA_SEED: {seed}");
    }

    let pipeline = Pipeline::new(
        config,
        cli.out.as_deref(),
        cli.workers,
        cli.force,
        cli.self_calibrate,
    )?;
    let command = cli.command.inner();
    eprintln!(
        "run {} -> {}",
        command.dir_name(),
        pipeline.run_dir.display()
    );
    pipeline.run(command)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
