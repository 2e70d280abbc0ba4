//! `mfa`: identifiability checks, simulation, fitting and Monte Carlo runs
//! for multi-channel factor analysis.

mod commands;
mod error;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AsympArgs, CheckArgs, FitArgs, McArgs, SimulateArgs, SweepArgs};
use error::CliError;

#[derive(Parser)]
#[command(name = "mfa", version, about = "Multi-channel factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the identifiability conditions for one structure.
    Check(CheckArgs),
    /// Largest identifiable r0 over a range of equal channel sizes.
    Sweep(SweepArgs),
    /// Draw observations from a model.
    Simulate(SimulateArgs),
    /// Quasi-maximum-likelihood fit.
    Fit(FitArgs),
    /// Asymptotic covariance and standard errors of an estimate.
    Asymp(AsympArgs),
    /// Monte Carlo NMSE over an (r0, T) grid.
    Mc(McArgs),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MFA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("MFA_THREADS must be a positive integer, got {:?}", v)))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::internal(e.to_string()))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Check(a) => commands::check(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit_cmd(a),
        Command::Asymp(a) => commands::asymp(a),
        Command::Mc(a) => commands::mc(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("mfa: {}", e);
            ExitCode::from(e.code as u8)
        }
    }
}
