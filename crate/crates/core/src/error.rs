use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A required column or config field is missing.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// An outer batch that does not contain every environment.
    #[error("degenerate batch: group {group} has no samples in the batch")]
    DegenerateBatch { group: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate probabilities: {0}")]
    DegenerateProbabilities(String),

    #[error("repetition {rep}: {source}")]
    Repetition {
        rep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Schema(_) | Error::Validation(_) | Error::Config(_) | Error::Json(_) => true,
            Error::Repetition { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
