//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MtsError {
    /// Shape mismatch in a matrix or graph primitive.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input left the legal domain of an op (e.g. log of non-positive).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (e.g. backward root not scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Dataset, CSV, or checkpoint parsing problem.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; run aborted.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MtsError>;
