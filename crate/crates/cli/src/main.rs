//! `hiclass` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! Logs go to stderr (`RUST_LOG`, default `info`); artifacts go to files.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AblateArgs, EvalArgs, GenArgs, GradcheckArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "hiclass", version, about = "Hierarchical multiple-instance classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

/// Error tagged with the exit code it maps to.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

/// Library errors caused by bad configuration count as usage errors.
impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config_error = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<hiclass::Error>(),
                Some(hiclass::Error::InvalidConfig(_))
            )
        });
        if config_error {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<hiclass::Error> for Failure {
    fn from(e: hiclass::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
