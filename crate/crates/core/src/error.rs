//! Error type shared across the engine.

use thiserror::Error;

/// Errors surfaced by corpus handling, search, steering, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}{}", ctx_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("non-finite value in row {row}{}", ctx_suffix(.context))]
    NonFinite { row: usize, context: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFiniteOp { op: &'static str },

    #[error("zero-norm vector for id {0:?}")]
    ZeroNorm(String),

    #[error("context set is empty")]
    EmptyContext,

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("bad magic bytes: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported format version {got} (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },

    #[error("truncated payload: declared {declared} items, found {found}")]
    Truncated { declared: usize, found: usize },

    #[error("invalid schedule {text:?}: {reason}")]
    InvalidSchedule { text: String, reason: String },

    #[error("invalid task {qid:?}: {reason}")]
    InvalidTask { qid: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("router is not frozen; freeze it before routing")]
    RouterNotFrozen,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn ctx_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
