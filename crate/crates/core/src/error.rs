use std::fmt::Write as _;
use std::path::PathBuf;

/// Everything that can go wrong in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invariant `{invariant}` violated{}", at(.index))]
    InvariantViolation {
        invariant: &'static str,
        index: Option<Vec<usize>>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on `{}`: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid synthetic motion: {0}")]
    Spec(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("feature stage error: expected {expected}, got {actual}")]
    Stage {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("mode error: {0}")]
    Mode(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("no valid pixels to average over")]
    EmptyValidSet,
    #[error("precondition failed: {0}")]
    Precondition(String),
}

fn at(index: &Option<Vec<usize>>) -> String {
    let mut s = String::new();
    if let Some(ix) = index {
        let _ = write!(s, " at {ix:?}");
    }
    s
}

impl Error {
    pub(crate) fn invariant(invariant: &'static str, index: impl Into<Option<Vec<usize>>>) -> Self {
        Error::InvariantViolation {
            invariant,
            index: index.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable code, used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvariantViolation { .. } => "E_INVARIANT",
            Error::ShapeMismatch(_) => "E_SHAPE",
            Error::Format(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Spec(_) => "E_SPEC",
            Error::Config { .. } => "E_CONFIG",
            Error::Stage { .. } => "E_STAGE",
            Error::Mode(_) => "E_MODE",
            Error::Range(_) => "E_RANGE",
            Error::EmptyValidSet => "E_EMPTY_VALID_SET",
            Error::Precondition(_) => "E_PRECONDITION",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
