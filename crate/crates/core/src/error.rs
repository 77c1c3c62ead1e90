use drivestyle_tensor::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing channel `{0}`")]
    Channel(String),

    #[error("{what}: size mismatch (expected {expected}, got {actual})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the failure stems from invalid settings rather than from the
    /// data being processed.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Nn(NnError::Config(_)) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
