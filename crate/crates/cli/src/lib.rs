//! Library side of the `adapters` experiment harness. The binary is a thin
//! clap wrapper over [`commands`].

pub mod commands;
pub mod config;

use std::path::Path;

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] adapter_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config validation, 3 artifact mismatch, 4 numerical abort, 1 other.
    pub fn exit_code(&self) -> i32 {
        use adapter_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Config { .. } | E::Policy(_) | E::SlotOccupied(_) => 2,
                E::Mismatch(_) | E::Format(_) => 3,
                E::NonFinite { .. } => 4,
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}
