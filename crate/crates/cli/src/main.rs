//! `gnq`: generate data, train, audit, bound, attack, defend and verify from
//! a single JSON run configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 capacity error,
//! 4 divergence, 5 verification failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnq_core::{AuditError, ErrorClass};

#[derive(Debug, Parser)]
#[command(
    name = "gnq",
    version,
    about = "Gradient-uniqueness membership-leakage audits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `sampling.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Caps worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Also write the per-example gradients used by every update.
    #[arg(long, global = true)]
    dump_gradients: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset to `dataset.csv`.
    GenData,
    /// Train and write the trajectory checkpoint.
    Train,
    /// Score every example and write the audit report and scores CSV.
    Audit {
        /// Audit a saved trajectory instead of training first.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Per-example leakage and Fano bounds.
    Bound,
    /// Loss-threshold membership inference against the trained model.
    Attack,
    /// Remove the top-ranked examples, retrain and compare.
    Defend,
    /// Run the enumeration checks on tiny instances.
    Oracle {
        /// Scale the closed-form kappa to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt_kappa: Option<f64>,
    },
}

fn exit_code(err: &AuditError) -> u8 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Capacity => 3,
        ErrorClass::Divergence => 4,
        ErrorClass::Verification => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let opts = commands::Options {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        dump_gradients: cli.dump_gradients,
    };
    match commands::run(&cli.command, &opts) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
