use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error(transparent)]
    Core(#[from] mpda_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// 1 for bad inputs, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Validation(_) | HarnessError::EmptyBenchmark => 1,
            HarnessError::Core(e) => match e {
                mpda_core::Error::Io(_) | mpda_core::Error::NonFinite(_) => 2,
                _ => 1,
            },
            HarnessError::Divergence { .. } | HarnessError::Io(_) | HarnessError::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
