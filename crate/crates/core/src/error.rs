//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation's precondition (bad value, bad argument).
    #[error("domain error: {0}")]
    Domain(String),

    /// A data structure invariant does not hold.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Tensor or layer geometry does not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// File does not start with the model magic.
    #[error("bad magic: not a model file")]
    BadMagic,

    /// File ended before the declared payload.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Stored CRC32 does not match the file contents.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// Structurally valid file with an unknown field value.
    #[error("unsupported format field: {0}")]
    Format(String),

    /// Training produced a non-finite loss or otherwise diverged.
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
