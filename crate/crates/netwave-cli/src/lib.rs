//! Command-line front end for the netwave library.
//!
//! Subcommands: `truth`, `train`, `test`, `plotdata`, `constants`. Every run
//! is driven by a TOML experiment file passed via `--config`; reports land in
//! the configured output directory.
//!
//! Exit codes: 0 success, 1 configuration or usage errors, 2 numerical
//! failures, 3 a certified bound was violated by the measured error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

use netwave::error::Error;

#[derive(Parser)]
#[command(name = "netwave", version, about = "certified reduced-basis solver for damped waves on networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full-order system at one parameter value.
    Truth {
        /// Experiment file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Damping scale to solve at.
        #[arg(long)]
        mu: f64,
    },
    /// Train a reduced basis with the POD-greedy loop.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Certify a trained basis against truth solves on a test sample.
    Test {
        #[arg(long)]
        config: PathBuf,
        /// Basis file; defaults to `<output dir>/basis.json`.
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Overrides the test-sample seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collect figure-ready tables (and optionally SVG plots) from reports.
    Plotdata {
        #[arg(long)]
        config: PathBuf,
        /// Also render SVG plots next to the CSV tables.
        #[arg(long)]
        svg: bool,
    },
    /// Print the stability constants entering the error bounds.
    Constants {
        #[arg(long)]
        config: PathBuf,
        /// Single parameter; defaults to the whole training set.
        #[arg(long)]
        mu: Option<f64>,
    },
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::InvalidNetwork(_)
        | Error::InvalidCoefficients(_)
        | Error::InvalidConfig(_)
        | Error::Expression(_)
        | Error::MuOutOfRange { .. }
        | Error::Io(_)
        | Error::Persist(_) => 1,
        Error::DimensionMismatch(_)
        | Error::Numerical(_)
        | Error::DecayFit(_)
        | Error::GreedyStagnation(_) => 2,
    }
}

fn dispatch(cli: Cli) -> netwave::Result<i32> {
    match cli.command {
        Command::Truth { config, mu } => {
            let exp = config::load_experiment(&config)?;
            commands::cmd_truth(&exp, mu)?;
            Ok(0)
        }
        Command::Train { config } => {
            let exp = config::load_experiment(&config)?;
            commands::cmd_train(&exp)?;
            Ok(0)
        }
        Command::Test { config, basis, seed } => {
            let exp = config::load_experiment(&config)?;
            let summary = commands::cmd_test(&exp, basis.as_deref(), seed)?;
            if summary.rigor_violations > 0 {
                eprintln!(
                    "error: measured error exceeded a certified bound at {} of {} checks",
                    summary.rigor_violations, summary.checked_points
                );
                Ok(3)
            } else {
                Ok(0)
            }
        }
        Command::Plotdata { config, svg } => {
            let exp = config::load_experiment(&config)?;
            commands::cmd_plotdata(&exp, svg)?;
            Ok(0)
        }
        Command::Constants { config, mu } => {
            let exp = config::load_experiment(&config)?;
            commands::cmd_constants(&exp, mu)?;
            Ok(0)
        }
    }
}

/// Parses `args` (including the program name) and runs the selected command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
