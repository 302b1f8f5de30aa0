//! Command-line driver: real-data analysis, simulation studies, and a fast
//! self-test battery.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for numerical
//! failures (and for self-test check failures).

mod analyze;
mod ingest;
mod selftest;
mod simulate;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use postsel::error::Error;

#[derive(Parser)]
#[command(
    name = "postsel",
    version,
    about = "Selective inference after randomized group-lasso selection",
    long_about = "Selective inference after randomized group-lasso selection.\n\
        Analyze a CSV dataset, run a replicated simulation study, or run the\n\
        built-in numerical self-tests. Simulation replications run in\n\
        parallel; set RAYON_NUM_THREADS to bound the worker count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run selective, split, or naive inference on a CSV dataset
    Analyze(analyze::AnalyzeArgs),
    /// Run a replicated simulation study from a JSON config
    Simulate(simulate::SimulateArgs),
    /// Run the fast numerical invariant battery
    Selftest(selftest::SelftestArgs),
}

/// Maps library errors onto the documented exit codes: input and
/// configuration problems are usage errors, everything numeric is not.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_)
        | Error::DimensionMismatch(_)
        | Error::DegreesOfFreedom { .. }
        | Error::DegenerateResponse(_)
        | Error::Io(_)
        | Error::Serialization(_) => 1,
        Error::LossOverflow { .. }
        | Error::RankDeficient { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::Separation { .. }
        | Error::NonConvergence { .. }
        | Error::NothingSelected
        | Error::BarrierDomain { .. } => 2,
    }
}

/// Restores the default SIGPIPE disposition so that piping output into a
/// pager that exits early terminates the process quietly instead of
/// panicking on a closed pipe.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help and version go to stdout, everything else to stderr.
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let outcome = match cli.command {
        Command::Analyze(args) => analyze::run(&args),
        Command::Simulate(args) => simulate::run(&args),
        Command::Selftest(args) => match selftest::run(&args) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("selftest: checks failed");
                std::process::exit(2);
            }
            Err(e) => Err(e),
        },
    };
    if let Err(err) = outcome {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
