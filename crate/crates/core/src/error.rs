use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input: shapes, labels, preconditions.
    #[error("invalid input: {0}")]
    Validation(String),
    /// Rank deficiency or another numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Rerandomization gave up.
    #[error("rerandomization exhausted after {tries} attempts without meeting threshold {threshold}")]
    Exhausted { tries: u64, threshold: f64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
            Error::Numerical(_) => 2,
            Error::Exhausted { .. } => 3,
        }
    }

    /// Prefixes the message while keeping the error class.
    pub fn context(self, what: impl std::fmt::Display) -> Error {
        match self {
            Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
