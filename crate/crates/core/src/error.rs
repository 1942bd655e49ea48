use std::path::PathBuf;

/// Failures reading or writing the binary feature/code files and checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("trailing bytes: expected {expected} bytes, file has {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("vocabulary size {0} exceeds the u16 code range")]
    VocabTooLarge(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("code {code} at position {position} is out of range for vocab {vocab}")]
    CodeOutOfRange { code: u32, position: usize, vocab: u32 },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed arguments that violate an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data is malformed or non-finite.
    #[error("data error: {0}")]
    Data(String),
    /// An exact oracle was asked to enumerate more combinations than it supports.
    #[error("capacity error: {combinations} combinations exceed the limit of {limit}")]
    Capacity { combinations: u128, limit: u128 },
    /// Training produced a non-finite loss.
    #[error("numeric abort at step {step}, batch index {batch_index}: {detail}")]
    Numeric {
        step: usize,
        batch_index: usize,
        detail: String,
    },
    #[error("format error in {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Capacity { .. } => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
