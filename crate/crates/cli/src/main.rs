//! `kp`: knowledge purification experiments from the command line.
//!
//! Every subcommand reads and writes files in the run directory
//! (`paths.out_dir`, default `kp-out`), so a run is a chain of commands:
//!
//! ```text
//! kp ingest --questions q.jsonl --rationales r.jsonl
//! kp split && kp embed
//! kp router train --method sim
//! kp distill --method sim
//! kp eval --student kp-out/student-sim.ckpt
//! ```

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use kp_core::Method;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "kp", version, about = "Multi-teacher rationale distillation with knowledge purification")]
pub struct Cli {
    /// JSON run config; missing keys take their defaults, unknown keys are errors.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set distill.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Run seed; every component derives its randomness from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory for inputs and artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate questions and rationales and copy them into the run directory.
    Ingest {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        rationales: Option<PathBuf>,
        /// Teacher order, comma separated.
        #[arg(long, value_delimiter = ',')]
        ensemble: Option<Vec<String>>,
    },
    /// Split every dataset's training pool into train and public parts.
    Split,
    /// Embed questions and rationales.
    Embed {
        /// Precomputed embedding file to use instead of the hashed encoder.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Router training.
    Router {
        #[command(subcommand)]
        action: RouterAction,
    },
    /// Route questions with a trained router and log the decisions.
    Route {
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Router checkpoint; defaults to the one `router train` wrote.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Student checkpoint the selector was trained with.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Use a selector without its paired student.
        #[arg(long)]
        allow_selector: bool,
        /// train, public, test, valid or all.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Merge every teacher's rationale into one per question.
    Aggregate {
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Distill a student. `--method` also accepts `tinyllm` (all rationales)
    /// and `teacher:<id>` (one teacher).
    Distill {
        #[arg(long)]
        method: Option<String>,
    },
    /// Train the teacher selector together with its student.
    SelectTeacher,
    /// Evaluate a student on the test split.
    Eval {
        #[arg(long)]
        student: PathBuf,
        /// Method name for the report rows; defaults to the checkpoint's.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Distill with growing teacher prefixes, with and without purification.
    Sweep {
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Convert a report, or extract its plot data.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Write `(method, n_teachers, acc)` series instead of the table.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic corpus into the run directory.
    Synth {
        /// specialization, noisy-duplicates or dominance.
        #[arg(long, default_value = "specialization")]
        preset: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum RouterAction {
    /// Fit a PL, classifier or similarity router on the public split.
    Train {
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: kp_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // --help and --version land here too
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .parse_default_env()
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `kp --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
