use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is rank deficient at column {column}")]
    Singular { column: usize },

    #[error("model not identifiable: {0}")]
    Unidentifiable(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("binary outcome has a single class ({0})")]
    SingleClass(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidParameter { .. })
    }
}
