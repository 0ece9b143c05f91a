//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor/graph shape incompatibility. Names the offending graph node.
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    /// A non-finite value appeared during evaluation. Names the node.
    #[error("non-finite value at {node}")]
    Overflow { node: String },

    /// An operation was called in the wrong order (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    /// One or more validation failures, each with a path to the violating field.
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// Row-level ingestion failure with the 1-based line number.
    #[error("line {line}: {detail}")]
    Row { line: usize, detail: String },

    /// A column required by the schema is missing from the input.
    #[error("schema error: {0}")]
    Schema(String),

    /// Exact enumeration would exceed the configured size budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Training aborted; carries the step index and a loss snapshot.
    #[error("training aborted at step {step}: {detail}")]
    TrainAbort { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(vec![msg.into()])
    }
}
