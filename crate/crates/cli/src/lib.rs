//! Command-line front end for the length-generalization lab.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 model-shape error.

pub mod app;
pub mod config;
pub mod manifest;
pub mod plot;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] lglab_core::Error),

    #[error("{}: {}", .0.display(), .1)]
    Io(PathBuf, std::io::Error),

    #[error("verification failed: {}", .0.join(", "))]
    VerifyFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Core(e) if e.is_shape() => 3,
            CliError::Usage(_) | CliError::Core(_) | CliError::Io(..) => 2,
        }
    }
}
