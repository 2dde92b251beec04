//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem-level failure, with the path that triggered it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed MetaImage header; the message names the offending key.
    #[error("metaimage header: {0}")]
    Header(String),

    /// Raw payload does not match the geometry declared in the header.
    #[error("metaimage payload: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    /// Element type outside the supported subset.
    #[error("unsupported element type {0:?}")]
    UnsupportedElement(String),

    /// Invalid volume geometry (dims, spacing, value-buffer length).
    #[error("geometry: {0}")]
    Geometry(String),

    /// A mask volume contained values other than 0 and 1.
    #[error("mask: voxel {index} has non-binary value {value}")]
    NonBinaryMask { index: usize, value: f32 },

    /// Configuration failed validation.
    #[error("config: {0}")]
    Config(String),

    /// Malformed or incompatible checkpoint container.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Tensor shape mismatch inside the network stack.
    #[error("shape: {0}")]
    Shape(String),

    /// A gradient or update became non-finite during training.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// JSON (experiment spec, manifest) failed to parse or validate.
    #[error("{context}: {message}")]
    Json { context: String, message: String },

    /// Dataset-level problem (missing files, empty split, bad manifest).
    #[error("dataset: {0}")]
    Dataset(String),

    /// A metric was requested on degenerate inputs (e.g. empty reference).
    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
