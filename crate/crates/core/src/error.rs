use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt store: {0}")]
    Corruption(String),

    #[error("dimension mismatch for word {word:?}: expected {expected} floats, got {actual}")]
    DimensionMismatch {
        word: String,
        expected: usize,
        actual: usize,
    },

    #[error("word {0:?} appears in more than one record group")]
    DuplicateWord(String),

    #[error("invalid record for word {word:?}: {reason}")]
    InvalidRecord { word: String, reason: String },

    #[error("word not found: {0:?}")]
    NotFound(String),

    #[error("{} word(s) could not be resolved: {}", .0.len(), preview(.0))]
    MissingWords(Vec<String>),

    #[error("policy {policy} selects no tokens in a record of {word:?}")]
    EmptySelection { word: String, policy: String },

    #[error("layer index {index} out of range for {num_layers} layers")]
    LayerOutOfRange { index: usize, num_layers: usize },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("CKA undefined: {0}")]
    UndefinedCka(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("insufficient coverage: {0}")]
    InsufficientCoverage(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("parse error in {segment:?}: {reason}")]
    Parse { segment: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(segment: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            segment: segment.into(),
            reason: reason.into(),
        }
    }
}

fn preview(words: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = words
        .iter()
        .take(SHOWN)
        .map(|w| format!("{w:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    if words.len() > SHOWN {
        s.push_str(&format!(", ... ({} more)", words.len() - SHOWN));
    }
    s
}
