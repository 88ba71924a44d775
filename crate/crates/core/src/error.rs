use std::path::PathBuf;

/// Errors raised anywhere in the crate.
///
/// Variants map onto the error classes of the public operations: bad
/// arguments, values outside a distribution's support, missing state
/// (e.g. clean labels), on-disk format problems and numeric failures
/// during training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Param(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("numeric error at epoch {epoch}{}: {msg}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    Numeric {
        epoch: usize,
        batch: Option<usize>,
        msg: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Domain(_) => "domain",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::Training(_) => "training",
            Error::Numeric { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
