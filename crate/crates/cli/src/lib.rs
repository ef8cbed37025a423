//! File formats and command implementations for the rhythm classification
//! pipeline. The numeric core lives in `rhythmlab-core`; this crate owns
//! everything that touches the filesystem:
//!
//! * `.sigc` signal containers and `.ann` annotation files,
//! * `.ds` preprocessed dataset files,
//! * checkpoint directories (named tensors + coefficient snapshots),
//! * run manifests and `key=value` config files,
//! * metric/compactness/similarity exports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod container;
pub mod dataset;
pub mod report;

use std::path::PathBuf;

pub use commands::run_command;

/// Everything a command can fail with, mapped onto process exit codes:
/// validation and I/O problems exit 1, numeric aborts exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] rhythmlab_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {detail}")]
    Format { what: &'static str, path: PathBuf, detail: String },

    #[error("invalid arguments: {0}")]
    Usage(String),

    #[error("numeric abort at epoch {epoch}, step {step}: {reason}")]
    NumericAbort { epoch: usize, step: usize, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NumericAbort { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
