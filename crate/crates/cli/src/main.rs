//! Experiment runner. Every command reads one flat config file (plus
//! `--set` overrides), computes, and writes CSV tables and a `report.json`
//! into the output directory.
//!
//! Exit codes: 0 when every in-command assertion held, 1 when an assertion
//! failed (the failures are printed and listed in the report), 2 for
//! configuration, parsing, or I/O problems.

use std::path::{Path, PathBuf};

use citrus_cli::commands;
use citrus_cli::config::{Config, RawConfig, Schema};
use citrus_core::{CitrusError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "citrus", version, about = "Product-graph diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Heat-kernel separability, forward-route equivalence, and RK4 checks.
    KernelCheck(CommonArgs),
    /// Test error of trained students under graph perturbations at fixed SNRs.
    Stability(CommonArgs),
    /// Layer-wise Dirichlet energy against its theoretical envelope.
    Oversmoothing(CommonArgs),
    /// Validation error and epoch time as functions of kept eigenpairs.
    Truncation(CommonArgs),
    /// Train and evaluate windowed forecasting on a series CSV.
    Forecast(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override one config entry (repeatable), e.g. `--set seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn dispatch(command: &Command) -> (&CommonArgs, Schema, fn(&Config, &Path) -> Result<Vec<String>>) {
    match command {
        Command::KernelCheck(a) => (a, commands::kernel_check::schema(), commands::kernel_check::run),
        Command::Stability(a) => (a, commands::stability::schema(), commands::stability::run),
        Command::Oversmoothing(a) => {
            (a, commands::oversmoothing::schema(), commands::oversmoothing::run)
        }
        Command::Truncation(a) => (a, commands::truncation::schema(), commands::truncation::run),
        Command::Forecast(a) => (a, commands::forecast::schema(), commands::forecast::run),
    }
}

fn execute(cli: &Cli) -> Result<Vec<String>> {
    let (args, schema, runner) = dispatch(&cli.command);
    let mut raw = RawConfig::from_file(&args.config)?;
    raw.apply_overrides(&args.set)?;
    let cfg = schema.resolve(&raw)?;
    runner(&cfg, &args.out)
}

/// Config and input problems are usage errors (2); everything that went
/// wrong while computing is a failure (1).
fn error_exit_code(e: &CitrusError) -> i32 {
    match e {
        CitrusError::Parse { .. }
        | CitrusError::InvalidArgument(_)
        | CitrusError::Validation(_)
        | CitrusError::Io(_) => 2,
        CitrusError::Numerical(_)
        | CitrusError::DegenerateSpectrum(_)
        | CitrusError::GenerationFailed(_) => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match execute(&cli) {
        Ok(failures) if failures.is_empty() => 0,
        Ok(failures) => {
            for f in &failures {
                eprintln!("failed: {f}");
            }
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    };
    std::process::exit(code);
}
