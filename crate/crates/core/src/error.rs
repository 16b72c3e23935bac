use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
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

    #[error("shape {shape:?} needs {expected} values, got {found}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor is not recorded on this tape")]
    NotOnTape,

    #[error("target is not one-hot: {0}")]
    NotOneHot(String),

    #[error("probability is zero at the target index {0}")]
    ZeroProbability(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("category index {index} out of range for {n_c} categories")]
    InvalidCategory { index: usize, n_c: usize },

    #[error("category {0} has no training samples, so no answer subset can be built")]
    EmptyCategory(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("evaluation set is empty")]
    EmptyEvaluation,

    #[error("{path}: bad file format: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: schema violation: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("record {record}: unresolved feature reference {path} (offset {offset})")]
    DanglingReference {
        record: usize,
        path: PathBuf,
        offset: u64,
    },

    #[error("record {record}: category id {id} out of range for {n_c} categories")]
    CategoryOutOfRange {
        record: usize,
        id: usize,
        n_c: usize,
    },

    #[error("synthetic data rejected: {0}")]
    Separability(String),

    #[error("cannot split: {0}")]
    Split(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. }
            | Error::Divergence { .. }
            | Error::NonFiniteGradient(_)
            | Error::ZeroProbability(_) => ErrorKind::Numeric,
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
