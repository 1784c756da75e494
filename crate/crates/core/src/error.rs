use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("series alignment mismatch: {0}")]
    Alignment(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("non-finite value produced by a stepping kernel")]
    NonFinite,
    #[error("numerical blowup at step {step}: {detail}")]
    Blowup { step: usize, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("internal consistency violated: {0}")]
    Consistency(String),
    #[error("unsupported for this system: {0}")]
    Unsupported(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a time index to a kernel-level [`Error::NonFinite`].
    pub fn at_step(self, step: usize) -> Error {
        match self {
            Error::NonFinite => Error::Blowup {
                step,
                detail: "non-finite state".into(),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
