use thiserror::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, layer depth, class target) is out of range.
    #[error("{what} out of range: {index} not in [0, {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A configuration field has an invalid value. `key` names the field.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// An API contract was violated (non-scalar loss, unsampled tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
