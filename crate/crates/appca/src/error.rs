use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, likelihood evaluation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A covariance became numerically singular because of a degenerate
    /// scale parameter (typically `sigma_y` close to zero).
    #[error("covariance is numerically singular: scale parameter `{name}` = {value} is degenerate")]
    DegenerateScale { name: &'static str, value: f64 },

    #[error("{path}: row {row}, column {column}: {message}")]
    CsvFormat {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
