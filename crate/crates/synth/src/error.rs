use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sample {id}: {path}: {message}")]
    Image {
        id: String,
        path: PathBuf,
        message: String,
    },
    #[error("{0}: {1}")]
    Csv(PathBuf, csv::Error),
    #[error("{0}: {1}")]
    Corrupt(PathBuf, String),
    #[error("dataset format version {found:?} does not match expected {expected}")]
    Version { found: Option<u64>, expected: u32 },
    #[error(transparent)]
    Core(#[from] vird_core::CoreError),
}

pub type Result<T> = std::result::Result<T, SynthError>;
