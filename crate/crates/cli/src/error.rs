//! Errors of the batch front-end.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown {kind} '{name}'; expected one of {expected}")]
    Unknown { kind: &'static str, name: String, expected: String },
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] ppalab_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;
