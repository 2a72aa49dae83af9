use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("audio error on {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("alignment error for clip {clip}: {message}")]
    Alignment { clip: String, message: String },

    #[error("external tool `{command}` failed: {diagnostics}")]
    ExternalTool { command: String, diagnostics: String },

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("sampling error: stratum `{0}` is exhausted")]
    Sampling(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("coverage error: no prediction for {0:?}")]
    Coverage(Vec<String>),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation/config, 2 runtime/numeric, 3 external tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Precondition(_)
            | Error::Coverage(_)
            | Error::UndefinedCorrelation(_)
            | Error::Sampling(_) => 1,
            Error::ExternalTool { .. } | Error::Labeling(_) => 3,
            Error::Io { .. }
            | Error::Audio { .. }
            | Error::Numeric(_)
            | Error::Alignment { .. }
            | Error::Fit(_)
            | Error::Checkpoint(_)
            | Error::Serde(_) => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
