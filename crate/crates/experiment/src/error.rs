use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}: {1}")]
    Csv(PathBuf, csv::Error),
    #[error("{0}: {1}")]
    Corrupt(PathBuf, String),
    #[error("{0}: {1}")]
    Png(PathBuf, png::EncodingError),
    #[error(transparent)]
    Core(#[from] vird_core::CoreError),
    #[error(transparent)]
    Synth(#[from] vird_synth::SynthError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}
