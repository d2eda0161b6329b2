//! Command-line driver for the fedprox laboratory.
//!
//! Exit codes: 0 success, 1 a verify check failed, 2 configuration error,
//! 3 solver failure.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<fedprox_core::Error> for CliError {
    fn from(e: fedprox_core::Error) -> Self {
        use fedprox_core::Error as E;
        match e {
            E::NonFinite(_) | E::SolverCap { .. } | E::LeftDomain { .. } => CliError::Solver(e.to_string()),
            E::Config(msg) => CliError::Config(msg),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}
