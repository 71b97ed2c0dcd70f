use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Every violation found in a config, one per entry.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{context}: {source}")]
    Case {
        context: String,
        #[source]
        source: pflow_core::Error,
    },

    #[error(transparent)]
    Core(#[from] pflow_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Tags a core failure with the case that produced it.
pub(crate) trait CaseContext<T> {
    fn case(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> CaseContext<T> for std::result::Result<T, pflow_core::Error> {
    fn case(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| LabError::Case {
            context: context(),
            source,
        })
    }
}
