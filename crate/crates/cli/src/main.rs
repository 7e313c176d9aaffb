//! `qann`: generate synthetic tasks, train, evaluate with hop sweeps, and
//! dump per-hop attention traces.

mod error;
mod eval;
mod gen;
mod inputs;
mod inspect;
mod manifest;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "qann", version, about = "Query-answer network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/dev/test splits in the canonical format.
    Gen(gen::GenArgs),
    /// Train a model, logging metrics and checkpoints to a run directory.
    Train(train::TrainArgs),
    /// Accuracy table for one hop count or a sweep.
    Eval(eval::EvalArgs),
    /// Per-hop attention, gate and span trace for one example.
    Inspect(inspect::InspectArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap reports usage errors with 2 already; help and version exit 0
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Inspect(a) => inspect::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
