use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input outside domain: {0}")]
    InputDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{file}{}: {msg}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        file: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("{0} not found")]
    NotFound(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InputDomain(_) => "input-domain",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Parse { .. } => "parse",
            Error::NotFound(_) => "not-found",
            Error::Io { .. } => "io",
            Error::NonFinite(_) => "non-finite",
            Error::Empty(_) => "empty",
            Error::Mismatch(_) => "mismatch",
            Error::RankDeficient(_) => "rank-deficient",
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: Option<usize>, msg: impl ToString) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
