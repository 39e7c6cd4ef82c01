use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid group layout: {0}")]
    Layout(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("collection has no members")]
    EmptyCollection,

    #[error("target density not reached: nearest density {density:.4} at lambda {lambda:.6e}")]
    TuningNotReached { lambda: f64, density: f64 },

    #[error("degenerate metric objective: {0}")]
    DegenerateObjective(String),

    #[error("missing descriptor for collection {0:?}")]
    MissingDescriptor(String),

    #[error("cannot evaluate an empty set of ranked lists")]
    EmptyEvaluation,

    #[error("no extractor registered for feature unit {0:?}")]
    UnknownUnit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mixed variants: {0}")]
    MixedVariants(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status used by the CLI for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_)
            | Error::DegenerateObjective(_)
            | Error::TuningNotReached { .. }
            | Error::InsufficientData { .. } => 3,
            _ => 2,
        }
    }
}
