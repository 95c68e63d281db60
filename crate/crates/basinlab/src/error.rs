//! Crate-wide error type and the exit-code mapping used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value is outside the operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// The caller violated an API contract (bad argument, wrong call order).
    #[error("usage error: {0}")]
    Usage(String),
    /// A model spec is invalid or does not match the supplied parameters.
    #[error("model spec error: {0}")]
    Spec(String),
    /// A file is not in the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),
    /// An experiment manifest failed schema validation.
    #[error("manifest schema error: {0}")]
    Schema(String),
    /// Training produced a non-finite loss or parameter.
    #[error("numeric divergence: {0}")]
    Diverged(String),
    /// A forward operation produced NaN/Inf from finite inputs.
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    /// Plane construction was given (nearly) colinear anchors.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 2 schema, 3 numeric divergence,
    /// 4 I/O or format, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) => 2,
            Error::Diverged(_) | Error::NonFinite(_) => 3,
            Error::Format(_) | Error::Io(_) | Error::Json(_) => 4,
            _ => 1,
        }
    }
}
