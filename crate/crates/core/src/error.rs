use thiserror::Error;

use crate::prompts::PartitionViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("input truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unexpected trailing bytes after the last record")]
    TrailingBytes,

    #[error("duplicate record name {0:?}")]
    DuplicateName(String),

    #[error("non-finite value in {0:?}")]
    NonFiniteValue(String),

    #[error("invalid record {name:?}: {reason}")]
    InvalidRecord { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("category {category:?} has {found} features, expected {expected}")]
    WrongCount {
        category: String,
        expected: usize,
        found: usize,
    },

    #[error("category {0:?} has an empty feature string")]
    EmptyFeature(String),

    #[error("category {category:?} lists feature {feature:?} more than once")]
    DuplicateFeature { category: String, feature: String },

    #[error("category {0:?} is missing")]
    MissingCategory(String),

    #[error("invalid super-class partition: {}", format_violations(.0))]
    InvalidPartition(Vec<PartitionViolation>),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("category {0} has no negative prompts")]
    EmptyNegativeSet(usize),

    #[error("score set is empty")]
    EmptySet,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True when the failure came from the filesystem or a stream rather
    /// than from malformed content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Json(e) => e.is_io(),
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}

fn format_violations(violations: &[PartitionViolation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
