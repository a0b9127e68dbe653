//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Shape errors carry the
//! offending dimensions so callers can report them without re-deriving
//! context.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the attempted operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value failed a domain precondition (range, emptiness, index bound).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value was found where finiteness is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// CSV parse failure with the 1-based row number.
    #[error("csv error at row {row}: {message}")]
    Csv { row: usize, message: String },

    /// JSON parse or schema failure.
    #[error("json error in {path}: {message}")]
    Json { path: String, message: String },

    /// Training aborted because the loss left the finite range. `detail`
    /// snapshots what was known at the failing step (term breakdown, batch).
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::InvalidArgument`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Shorthand for [`Error::NonFinite`].
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
