use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The variants group into the exit-code classes used by the command-line
/// front end: input problems, failed preconditions or verdicts, and numeric
/// failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("point lies on a closed-cube face")]
    Boundary,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("not equivalent: {0}")]
    NotEquivalent(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("trajectory left the safety box at t = {time}: {detail}")]
    Completeness { time: f64, detail: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// `pos` is a byte offset in expressions and a line number in CSV input.
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to choose a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Precondition,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Input(_)
            | Error::Range(_)
            | Error::Boundary
            | Error::Unsupported(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Input,
            Error::Geometry(_) | Error::NotEquivalent(_) | Error::Invariant(_) => {
                ErrorClass::Precondition
            }
            Error::Completeness { .. } | Error::Numeric(_) => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
