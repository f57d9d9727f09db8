//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("assignment is missing a value for variable {0}")]
    IncompleteAssignment(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("unsupported query: {0}")]
    UnsupportedQuery(String),

    #[error("conditioning on zero-probability evidence")]
    NullEvidence,

    #[error("row {row} has zero probability under the current parameters")]
    RowImpossible { row: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("row {row}, column {column:?}: unknown category {value:?}")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },

    #[error("binning error: {0}")]
    Binning(String),

    #[error("variable {0:?} has no observed values")]
    InsufficientData(String),

    #[error("scope error: {0}")]
    Scope(String),

    #[error("sensitive group S={0} is empty")]
    EmptyGroup(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
