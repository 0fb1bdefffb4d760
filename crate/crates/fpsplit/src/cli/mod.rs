//! Command-line driver: `run`, `validate`, `study` and `oracle` on a config file.

mod commands;
mod config;
mod moments;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::entropic_ot::TestFunction;

pub use commands::{cmd_oracle, cmd_run, cmd_study, cmd_validate, OracleRow};
pub use config::{InitialSpec, KernelSpec, ModelSpec, OracleSpec, OutputSpec, PotentialSpec, RunConfig, ValidateSpec, OUTPUT_DIR_ENV, RESOLVED_NAME};
pub use moments::{linear_coefficients, moment_ode, LinearCoefficients};

#[derive(Debug, Parser)]
#[command(name = "fpsplit", version, about = "Splitting solver for degenerate non-local Fokker-Planck equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve and write report.csv, snapshots and the resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check the model and scaling assumptions and print a pass/fail table.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convergence study over a list of window counts; writes study.csv.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Window counts, e.g. 8,16,32.
        #[arg(long, value_delimiter = ',', required = true)]
        windows: Vec<usize>,
    },
    /// Cross-check one JKO step against the exact small-instance oracles.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Runs one command and returns the process exit status.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> i32 {
    let res = match &cli.command {
        Command::Run { config } => RunConfig::load(config).and_then(|c| cmd_run(&c, out)),
        Command::Validate { config } => RunConfig::load(config).and_then(|c| cmd_validate(&c, out)),
        Command::Study { config, windows } => RunConfig::load(config).and_then(|c| cmd_study(&c, windows, out).map(|_| ())),
        Command::Oracle { config } => RunConfig::load(config).and_then(|c| cmd_oracle(&c, out).map(|_| ())),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The fixed battery of five test functions used for Euler-Lagrange residuals.
pub fn default_tests(d: usize) -> Vec<TestFunction> {
    let at = |v: f64| vec![v; d];
    let freq = |v: f64| (0..d).map(|k| v / (1.0 + k as f64)).collect::<Vec<_>>();
    vec![
        TestFunction::gaussian(at(0.0), 1.0),
        TestFunction::gaussian(at(0.7), 0.6),
        TestFunction::gaussian(at(-0.5), 0.8),
        TestFunction::sine(freq(0.8), at(0.2)),
        TestFunction::sine(freq(1.3), at(-0.4)),
    ]
}
