use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid hyperparameters, bad architecture.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity showed up in a named tensor.
    #[error("numeric error: non-finite value in {tensor}")]
    Numeric { tensor: String },

    /// The caller broke a precondition (length mismatch, stale tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// The input is well formed but carries no signal to normalize by.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("training failed at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numeric(tensor: impl Into<String>) -> Self {
        Error::Numeric {
            tensor: tensor.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used by the command line front-end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Usage(_) => "usage",
            Error::Degenerate(_) => "degenerate",
            Error::Parse { .. } => "parse",
            Error::EmptyDataset(_) => "parse",
            Error::Training { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::Json(_) => "schema",
            Error::Csv(_) => "parse",
        }
    }
}

/// Fails with a numeric error naming `tensor` if any entry is NaN or infinite.
pub(crate) fn ensure_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    tensor: impl FnOnce() -> String,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(tensor()))
    }
}
