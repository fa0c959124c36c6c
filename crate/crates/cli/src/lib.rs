//! Experiment runner for the quench laboratory.
//!
//! Every command resolves a [`config::RunConfig`], writes its artifacts under
//! the configured output directory together with a manifest, and maps its
//! outcome onto a fixed exit-code contract (see [`exit`]).

pub mod commands;
pub mod config;
pub mod output;
pub mod suites;

use quench_core::QuenchError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVARIANT_FAILURE: i32 = 1;
    pub const SOLVER_ABORT: i32 = 2;
    pub const CONFIG_ERROR: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] QuenchError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG_ERROR,
            CliError::Core(QuenchError::InvalidParameter { .. } | QuenchError::Infeasible(_)) => {
                exit::CONFIG_ERROR
            }
            _ => exit::SOLVER_ABORT,
        }
    }
}

pub const ARTIFACT: &str = concat!("quench ", env!("CARGO_PKG_VERSION"));
