use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched shapes/extents.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was invoked in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// NaN/inf surfaced during a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Stored data disagrees with what the code expects.
    #[error("data error: {0}")]
    Data(String),

    #[error("hook `{hook}` failed: {source}")]
    Hook {
        hook: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_hook(hook: &'static str, source: Error) -> Self {
        Error::Hook {
            hook,
            source: Box::new(source),
        }
    }
}
