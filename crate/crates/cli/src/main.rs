//! `fairgen`: data generation, training stages, audits and reports for
//! balanced preference optimization on a synthetic world.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.

mod audit;
mod gen;
mod load;
mod manifest;
mod report;
mod train;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairgen_core::FairgenError;

#[derive(Debug, Parser)]
#[command(name = "fairgen", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a JSONL dataset from a world spec.
    GenData(gen::GenArgs),
    /// Run the sft or bpo stage.
    Train(train::TrainArgs),
    #[command(subcommand)]
    Audit(audit::AuditCmd),
    /// Summarize run and audit directories as markdown.
    Report(report::ReportArgs),
}

/// Invalid combination of flags or inputs.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FairgenError>() {
            return match e {
                FairgenError::NumericalAbort(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<Usage>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenData(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Audit(c) => audit::run(c),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
