//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Header line is not "N d" with two positive integers.
    #[error("malformed header at line {line}: {detail}")]
    MalformedHeader { line: usize, detail: String },

    /// N or d declared as zero.
    #[error("header at line {line} declares empty matrix: n={n}, d={d}")]
    EmptyDims { line: usize, n: usize, d: usize },

    /// A row does not contain exactly `expected` values.
    #[error("row at line {line}: expected {expected} values, found {found}")]
    RowLength {
        line: usize,
        expected: usize,
        found: usize,
    },

    /// NaN or infinity encountered while parsing.
    #[error("non-finite value at line {line}, field {field}")]
    NonFinite { line: usize, field: usize },

    /// A field that should be a decimal float is not one.
    #[error("unparseable number at line {line}, field {field}")]
    BadNumber { line: usize, field: usize },

    /// Fewer data rows than the header declared.
    #[error("input ended after {found} of {expected} declared rows")]
    MissingRows { expected: usize, found: usize },

    /// Binary stream ended before the declared number of records.
    #[error("truncated input: record {record} incomplete at byte offset {offset}")]
    Truncated { record: usize, offset: u64 },

    /// Binary record is structurally invalid (label/terminator framing).
    #[error("malformed record {record} at byte offset {offset}: {detail}")]
    MalformedRecord {
        record: usize,
        offset: u64,
        detail: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for {n} vectors")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    /// Head set and tail sample share an index; the tail must be drawn
    /// from the complement of the head.
    #[error("head and tail overlap at index {index}")]
    HeadTailOverlap { index: usize },

    /// Requested tail sample larger than the complement of the excluded set.
    #[error("tail sample of {requested} exceeds {available} available indices")]
    TailTooLarge { requested: usize, available: usize },

    /// A dropped rank lies beyond the extended top list it is dropped from.
    #[error("dropped rank {rank} unreachable: extended top list has {max} entries")]
    UnreachableRank { rank: usize, max: usize },

    /// Tail scores were not computed (no query supplied to `sample_tail`).
    #[error("tail sample carries no scores; pass a query when sampling")]
    MissingTailScores,

    #[error("label `{0}` not found in embedding matrix")]
    UnknownLabel(String),

    #[error("corrupt index file: {0}")]
    CorruptIndex(String),

    #[error("corrupt feature map file: {0}")]
    CorruptModel(String),

    #[error("feature map has no precomputed coefficients; run precompute first")]
    MissingLambda,
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}
