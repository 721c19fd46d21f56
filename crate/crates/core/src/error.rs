use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its valid range.
    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate world: {0}")]
    DegenerateWorld(String),

    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),

    /// Token or entity id outside the vocabulary, or a malformed sequence.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Bad model input (overlong sequence, unknown token, empty batch).
    #[error("input error: {0}")]
    Input(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("undefined: {0}")]
    Undefined(String),

    /// NaN/inf encountered during optimization.
    #[error("numerical failure at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("{path}: {message}")]
    Validation { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn validation(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by numeric blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    /// True for errors about malformed or inconsistent inputs and configs.
    pub fn is_validation(&self) -> bool {
        !self.is_numerical() && !matches!(self, Error::Io { .. })
    }
}
