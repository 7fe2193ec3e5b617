use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("non-finite value produced by node `{node}`")]
    NonFinite { node: String },

    #[error("loss node `{0}` is not a scalar")]
    NonScalarLoss(String),

    #[error("node `{0}` was not evaluated by the forward pass")]
    NotEvaluated(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("view misalignment: {0}")]
    Misaligned(String),

    #[error("{split} split: record {id} has label {label}; training and evaluation need 0 or 1")]
    Unlabeled { split: String, id: u64, label: u8 },

    #[error("single-class input: metric needs both bonafide and fake scores")]
    SingleClass,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFinite { .. } | Error::NanLoss { .. } => ErrorCategory::Numerical,
            Error::InvalidSpec(_) | Error::Config(_) | Error::InvalidArgument(_) => {
                ErrorCategory::Config
            }
            _ => ErrorCategory::Data,
        }
    }
}
