//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Pinhole projection with the point on the camera's principal plane.
    #[error("degenerate projection: point lies on the camera plane (P3^T p = 0)")]
    DegenerateProjection,

    /// The 2D Newton solve for back-projection did not converge.
    #[error("back-projection failed to converge after {iterations} iterations (residual {residual:.3e} px)")]
    BackProjectionFailure { iterations: usize, residual: f64 },

    /// A pixel ray does not intersect the measurement volume.
    #[error("ray through pixel ({u:.2}, {v:.2}) misses the volume")]
    EmptyRay { u: f64, v: f64 },

    /// Polynomial camera fit with too few or degenerate correspondences.
    #[error("underdetermined camera fit: {0}")]
    UnderdeterminedFit(String),

    /// Image dimensions do not match where they must.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Image set is missing a camera or a time step.
    #[error("invalid image set: {0}")]
    InvalidImageSet(String),

    /// Backtracking in the optimizer exceeded its doubling budget; this
    /// signals a gradient bug rather than a hard problem instance.
    #[error("optimizer step failure: block {block} exceeded {doublings} step-size doublings")]
    StepFailure { block: &'static str, doublings: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    FileFormat { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn file_format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::FileFormat { path: path.into(), message: message.into() }
    }
}
