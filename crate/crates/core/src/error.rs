use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Training stage in which a numerical failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    SelfSupervised,
    Refinement,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Supervised => "supervised pairwise step",
            Phase::SelfSupervised => "self-supervised pairwise step",
            Phase::Refinement => "cluster refinement",
        })
    }
}

/// Errors raised while reading or writing embedding, token, and checkpoint files.
///
/// Row numbers are zero-based data rows (the TSV header is not counted).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("file declares zero rows")]
    EmptyDataset,
    #[error("row {row}: expected {expected} values, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("row {row}: non-finite value in column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("row {row}: cannot parse {text:?} as a number (column {column})")]
    InvalidNumber { row: usize, column: usize, text: String },
    #[error("row {row}: unknown split tag {tag:?}")]
    UnknownSplit { row: usize, tag: String },
    #[error("row {row}: label is not valid UTF-8")]
    InvalidUtf8 { row: usize },
    #[error("row {row}: unlabeled row in a labeled file (labels must be all present or all empty)")]
    PartialLabels { row: usize },
    #[error("row {row}: token sequence is empty")]
    EmptyTokens { row: usize },
    #[error("unexpected end of file while reading {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dataset has no class labels")]
    Unlabeled,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache does not match the current parameters")]
    StaleCache,
    #[error("non-finite gradient in {phase}")]
    NonFiniteGradient { phase: Phase },
    #[error("non-finite parameters after update in {phase}")]
    NonFiniteParameters { phase: Phase },
    #[error("degenerate intent representation: row {row} has norm {norm:e}")]
    DegenerateRepresentation { row: usize, norm: f64 },
    #[error("no pairs selected for the similarity loss")]
    EmptySelection,
    #[error("batch member {0} has no label")]
    MissingLabel(usize),
    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("length mismatch: {left} true labels vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    /// Numerical failures during training, as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. }
                | Error::NonFiniteParameters { .. }
                | Error::DegenerateRepresentation { .. }
        )
    }
}
