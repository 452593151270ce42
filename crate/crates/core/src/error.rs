use std::path::PathBuf;

/// Errors raised anywhere in the conversion stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("mode {mode} unsupported for this request: {reason}")]
    ModeUnsupported { mode: String, reason: String },
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        match $cond {
            true => {}
            false => return Err($crate::error::Error::$variant(format!($($arg)+))),
        }
    };
}
pub(crate) use ensure;
