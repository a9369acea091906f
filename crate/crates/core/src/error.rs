//! Unified error type for the simulator core.

use thiserror::Error;

/// Everything that can go wrong across the crate, grouped by kind so callers
/// can map errors onto process exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid configuration or argument value.
    #[error("config error: {0}")]
    Config(String),
    /// An index fell outside its allowed range.
    #[error("range error: {0}")]
    Range(String),
    /// A computation produced non-finite or degenerate values.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Client data partitioning failed.
    #[error("partition error: {0}")]
    Partition(String),
    /// A data file did not match its expected format.
    #[error("format error: {0}")]
    Format(String),
    /// Privacy floor violated: fewer samples than local clusters.
    #[error("anonymity error: {0}")]
    Anonymity(String),
    /// Server-side aggregation received nothing usable.
    #[error("aggregation error: {0}")]
    Aggregation(String),
    /// A federation round could not produce any client results.
    #[error("round error: {0}")]
    Round(String),
    /// File I/O failed.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
