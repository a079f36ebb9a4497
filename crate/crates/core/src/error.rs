use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violates a documented invariant (dimensions, ranges, positivity).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A numerical routine could not produce a finite or well-defined result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A sampler step failed inside a chain.
    #[error("numeric failure at sweep {sweep} in step {step}: {source}")]
    Sweep {
        sweep: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for failures that stem from bad inputs rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) | Error::Parse(_) | Error::Csv(_) | Error::Json(_) | Error::Io(_) => true,
            Error::Sweep { source, .. } => source.is_validation(),
            Error::Numeric(_) => false,
        }
    }
}
