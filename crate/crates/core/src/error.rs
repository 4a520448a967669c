//! Crate-wide error type.

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is singular beyond regularization (smallest eigenvalue {min_eig:.3e})")]
    Singular { min_eig: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} has no trials")]
    EmptyClass(u8),

    #[error("non-finite loss at epoch {epoch}: {context}")]
    NonFiniteLoss { epoch: usize, context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
