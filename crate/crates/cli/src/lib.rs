//! Command-line pipeline: expert data, training, evaluation and single runs.

pub mod commands;
pub mod config;
pub mod plots;

use std::ffi::OsString;

use clap::Parser;
use thiserror::Error;

pub use config::{Cli, Command, ControllerKind, RunConfig, ScenarioSelector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
/// An evaluation finished but missed a configured threshold.
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("threshold not met: {0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
            Self::Threshold(_) => EXIT_THRESHOLD,
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub fn execute(config: &RunConfig) -> Result<(), CliError> {
    match config.command {
        Command::GenData => commands::cmd_gen_data(config).map(drop),
        Command::Train => commands::cmd_train(config).map(drop),
        Command::Eval => commands::cmd_eval(config).map(drop),
        Command::Run => commands::cmd_run(config).map(drop),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = RunConfig::resolve(cli)
        .map_err(CliError::Usage)
        .and_then(|c| execute(&c));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
