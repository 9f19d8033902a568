//! Command implementations behind the `demoaug` binary.

pub mod commands;
pub mod config;
pub mod plot;

use demoaug_core::agent::AgentError;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config fields or input files. Exit code 2.
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    /// Anything that failed after the inputs were accepted. Exit code 3.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(p) => CliError::Config(p),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
