use std::path::PathBuf;

use thiserror::Error;

/// Failures while decoding the binary tensor encoding shared by feature files
/// and checkpoints.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unsupported dtype code {0} (only f32 = 0 is supported)")]
    Dtype(u8),
    #[error("unsupported rank {0}")]
    Rank(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("zero-sized dimension in {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
}

/// Coarse classification used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),
    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    Degenerate { norm: f64, eps: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("label {label} is outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("class {class} ({name}) has no training samples")]
    MissingClass { class: usize, name: String },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Param(_) => ErrorKind::Config,
            Error::Format { .. }
            | Error::Data(_)
            | Error::MissingClass { .. }
            | Error::Label { .. }
            | Error::Io { .. }
            | Error::Json { .. } => ErrorKind::Data,
            Error::Shape { .. }
            | Error::EmptySequence(_)
            | Error::Degenerate { .. }
            | Error::Contract(_)
            | Error::NonFiniteGrad(_)
            | Error::Diverged { .. } => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
