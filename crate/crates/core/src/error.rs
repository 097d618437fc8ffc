use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("run with seed {seed} failed: {source}")]
    Experiment {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input (config, usage, parse) as
    /// opposed to failures while executing a valid request.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Json(_) => true,
            Error::Experiment { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
