use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A region (shrunk domain, complement, ...) contains no points.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    /// An evaluation hit a removable or genuine singularity closer than the
    /// configured exclusion threshold.
    #[error("singular evaluation: {0}")]
    SingularEvaluation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// A numeric check failed; `witness` localizes the failure.
    #[error("validation failed: {name} ({witness})")]
    Validation { name: String, witness: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(name: impl Into<String>, witness: impl Into<String>) -> Self {
        Error::Validation {
            name: name.into(),
            witness: witness.into(),
        }
    }
}
