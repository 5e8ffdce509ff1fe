//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulation, analysis, and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its mathematical or physical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes of matrices, vectors, or probe lists do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A fit collapsed or an iteration produced an unusable state.
    #[error("degenerate result: {0}")]
    Degenerate(String),

    /// The integration step cannot resolve the fastest circuit time constant.
    #[error("unstable integration: {0}")]
    Unstable(String),

    /// A config file or data file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A pipeline stage output required by the requested operation is absent.
    #[error("missing stage output: {0}")]
    MissingStage(String),

    /// A pipeline stage failed while running.
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
