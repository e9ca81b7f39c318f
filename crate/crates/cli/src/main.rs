//! `cmpc`: generate synthetic voice/face data, train, evaluate, export
//! embeddings and draw diagnostics.
//!
//! Exit codes: 0 success, 2 invalid flags, 3 data or path error, 4 numeric
//! failure.

mod embed;
mod error;
mod eval;
mod gen;
mod io;
mod plot;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cmpc", version, about = "Cross-modal prototype contrastive learning on synthetic voice/face data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with an identity-disjoint split.
    Gen(gen::GenArgs),
    /// Train paired encoders (CID, CMPC, or CMPC with recalibration).
    Train(train::TrainArgs),
    /// Evaluate matching, verification and retrieval on the test split.
    Eval(eval::EvalArgs),
    /// Export embeddings of a dataset split.
    Embed(embed::EmbedArgs),
    /// Write ρ histogram, PCA scatter and loss-curve diagnostics.
    Plot(plot::PlotArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Embed(a) => embed::run(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
