mod apply;
mod error;
mod fit;
mod schema;
mod simulate;
mod table;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, CliResult};

/// Conditionally invariant feature extraction and shift experiments.
#[derive(Debug, Parser)]
#[command(name = "otbe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a feature extractor and its prediction head.
    Fit(fit::FitArgs),
    /// Write the features `w_1..w_d` of each row.
    Transform(apply::ApplyArgs),
    /// Write predictions (`yhat_*` or `class`) for each row.
    Predict(apply::ApplyArgs),
    /// Run a simulation experiment.
    Simulate(simulate::SimulateArgs),
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("OTBE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::usage(format!("OTBE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Fit(args) => fit::run(args),
        Command::Transform(args) => apply::transform(args),
        Command::Predict(args) => apply::predict(args),
        Command::Simulate(args) => simulate::run(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
