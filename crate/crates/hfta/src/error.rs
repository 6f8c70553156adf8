//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An operator configuration is invalid on its own terms.
    #[error("invalid config: {0}")]
    Config(String),

    /// Models cannot be fused because a config field differs across them.
    #[error("infusible: field `{field}` differs across models: {detail}")]
    Infusible { field: String, detail: String },

    /// Gradient-tape misuse (detached values, non-scalar roots, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// An operation contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index is outside its valid range.
    #[error("index out of range: {0}")]
    Range(String),

    /// Optimizer state drifted out of sync with its parameters.
    #[error("state error: {0}")]
    State(String),

    /// Fusion metadata does not match the value it describes.
    #[error("fusion error: {0}")]
    Fusion(String),

    /// A graph document violates the JSON schema.
    #[error("schema error at node `{node}`: {detail}")]
    Schema { node: String, detail: String },

    /// A graph or config fails structural validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tuning results do not cover the proposed sets exactly once.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A fuse plan marks an infusible block as fused.
    #[error("plan error: {msg}\n{report}")]
    Plan { msg: String, report: String },

    /// Fusion was requested over zero models.
    #[error("empty fusion: {0}")]
    EmptyFusion(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
