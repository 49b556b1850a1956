//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by tensor operations, the compression pipeline, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an argument contract (bad permutation, wrong dtype, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes are inconsistent with the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A numerical procedure failed (SVD non-convergence, non-finite loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A compression plan failed schema validation.
    #[error("invalid plan: {0}")]
    Plan(String),

    /// A model manifest is inconsistent with its checkpoint.
    #[error("invalid manifest: {0}")]
    Manifest(String),

    /// Checkpoint file ends before the header or a payload does.
    #[error("truncated file: {0}")]
    TruncatedFile(String),

    /// Checkpoint header is not the expected JSON document.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    /// Tensor data offsets overlap, overflow, or disagree with dtype x shape.
    #[error("offset error: {0}")]
    OffsetError(String),

    /// Header names a dtype this toolkit does not understand.
    #[error("unknown dtype: {0}")]
    UnknownDtype(String),

    /// A tensor name is empty, non-ASCII, or collides with an existing entry.
    #[error("tensor name error: {0}")]
    TensorName(String),

    /// A referenced tensor is absent from the checkpoint.
    #[error("missing tensor: {0}")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of numerical procedures, as opposed to bad inputs.
    /// The CLI maps these to a dedicated exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
