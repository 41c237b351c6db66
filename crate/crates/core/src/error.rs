use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A value fell outside the parameter space; `index` is the offending component.
    #[error("component {index} = {value} outside [{lower}, {upper}]")]
    OutOfRange { index: usize, value: f64, lower: f64, upper: f64 },

    /// A covariance matrix could not be factored even after the full jitter escalation.
    #[error("ill-conditioned matrix ({context}): Cholesky failed with jitter up to {max_jitter:e}")]
    Conditioning { context: String, max_jitter: f64 },

    /// Degenerate numerical input, e.g. a zero-variance ensemble.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// Failure inside a named pipeline stage.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::InvalidInput(_) | Error::OutOfRange { .. } => 2,
            Error::Conditioning { .. } | Error::Numerical(_) => 3,
            Error::Io(_) | Error::Parse { .. } => 4,
            Error::Stage { .. } => unreachable!(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Parse { path: String::from("<csv>"), message: format!("{kind:?}") },
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(io::Error::other(e))
        } else {
            Error::Parse { path: String::from("<json>"), message: e.to_string() }
        }
    }
}
