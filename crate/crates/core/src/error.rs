use thiserror::Error;

use crate::geometry::LineId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("{0} has no parent (it is the on-chip root)")]
    NoParent(LineId),

    #[error("{0} has no children")]
    NoChildren(LineId),

    #[error("{0} is outside the simulated address space")]
    OutOfRange(LineId),

    #[error("byte offset {0:#x} does not name a line")]
    BadOffset(u64),

    #[error("{0} is not a metadata line")]
    NotMetadata(LineId),

    #[error("integrity violation while verifying {0}")]
    IntegrityViolation(LineId),

    #[error("{0} decrypted to unexpected plaintext")]
    PlaintextMismatch(LineId),

    #[error("shadow validation failed: {0}")]
    Invariant(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),

    #[error("stats schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("metadata cache set {0} has every way pinned; the cache is too small for this tree")]
    SetExhausted(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::SchemaVersion { .. } | Error::Json(_) => 2,
            Error::IntegrityViolation(_) => 3,
            _ => 1,
        }
    }
}
