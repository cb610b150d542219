//! Command implementations behind the `beacof` binary.
//!
//! Exit codes: 0 success, 1 failed check or replay divergence, 2 config,
//! 3 backend or incomplete run, 4 trace, 5 mode.

pub mod commands;
pub mod config;

use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_TRACE: u8 = 4;
pub const EXIT_MODE: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Failure(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Trace(String),
    #[error("{0}")]
    Mode(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failure(_) => EXIT_FAILURE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Trace(_) => EXIT_TRACE,
            CliError::Mode(_) => EXIT_MODE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum OutputFormat {
    /// Aligned plain text.
    #[default]
    Text,
    /// One JSON document per output.
    Machine,
}
