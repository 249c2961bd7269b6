use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-integral azimuth shift for theta={theta} rad with W_s={width}: {shift} columns")]
    NonIntegralShift { theta: f64, width: usize, shift: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("index {index} outside volume of {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty similarity volume")]
    EmptyVolume,
}

pub type Result<T> = std::result::Result<T, CoreError>;
