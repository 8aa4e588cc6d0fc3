use thiserror::Error;

pub type Result<T, E = McfError> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum McfError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl McfError {
    pub fn config(msg: impl Into<String>) -> Self {
        McfError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        McfError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        McfError::Numeric(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            McfError::Config(_) | McfError::Json(_) => ErrorKind::Config,
            McfError::Numeric(_) => ErrorKind::Numeric,
            McfError::Data(_) | McfError::Parse { .. } | McfError::Io(_) | McfError::Csv(_) => {
                ErrorKind::Data
            }
        }
    }
}
