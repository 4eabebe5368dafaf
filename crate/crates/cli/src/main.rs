//! `cuside-array`: dataset synthesis, training, evaluation, enhancement,
//! streaming, benchmarks and verification.
//!
//! Options resolve as flags > `--config` file > defaults, and every command
//! prints its resolved options as one JSON line on stderr.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 I/O error.

mod commands;
mod options;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use options::{BenchArgs, EnhanceArgs, EvalArgs, SimulateArgs, StreamArgs, TrainArgs, VerifyArgs};

#[derive(Parser)]
#[command(name = "cuside-array", version, about = "Streaming multi-channel CTC recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a toy multi-channel dataset.
    Simulate(SimulateArgs),
    /// Train the joint front-end/back-end model.
    Train(TrainArgs),
    /// Score non-streaming and streaming decoding per context mode.
    Eval(EvalArgs),
    /// Chunked front-end enhancement of one recording.
    Enhance(EnhanceArgs),
    /// Streaming recognition of one recording with an event log.
    Stream(StreamArgs),
    /// Per-stage timing over a fixed workload.
    Bench(BenchArgs),
    /// Run the invariant and oracle checks.
    Verify(VerifyArgs),
}

/// How a command failed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
    Io(String),
}

impl From<cuside_array::Error> for Failure {
    fn from(e: cuside_array::Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Stream(a) => commands::stream(a),
        Command::Bench(a) => commands::bench(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Verification(m) | Failure::Io(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
