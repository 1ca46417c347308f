//! Operator surface for the plan/ground/execute toolchain: run episodes,
//! convert rationales into annotations, organize annotations into training
//! conversations, and evaluate recorded traces.
//!
//! Exit codes: 0 success, 1 data-level failure, 2 usage or configuration
//! error. All outputs are deterministic for fixed inputs and scripted
//! backends; logs go to stderr.

mod config;
mod convert;
mod error;
mod evaluate;
mod jsonl;
mod organize;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "planact", version, about = "Plan/ground/execute agent toolchain")]
struct Cli {
    /// Log filter written to stderr: off, error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode per task line and write traces.
    Run(run::RunArgs),
    /// Rewrite rationales into subgoal/action annotations and filter them.
    Convert(convert::ConvertArgs),
    /// Shape annotations into training conversations and records.
    Organize(organize::OrganizeArgs),
    /// Score traces against golds and print aggregate rows.
    Evaluate(evaluate::EvaluateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    let outcome: Result<(), CliError> = match cli.command {
        Command::Run(args) => run::exec(args),
        Command::Convert(args) => convert::exec(args),
        Command::Organize(args) => organize::exec(args),
        Command::Evaluate(args) => evaluate::exec(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
