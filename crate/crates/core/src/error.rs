use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("malformed mutant token `{token}`: {reason}")]
    MutantToken { token: String, reason: String },

    #[error("wildtype mismatch at position {position}: expected {expected}, found {found}")]
    WildtypeMismatch {
        position: usize,
        expected: char,
        found: char,
    },

    #[error("duplicate sequence in dataset (mutant `{0}`)")]
    DuplicateSequence(String),

    #[error("non-numeric score `{value}` for mutant `{mutant}`")]
    BadScore { mutant: String, value: String },

    #[error("unknown amino acid `{0}`")]
    UnknownResidue(char),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("bad store file: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("split infeasible: {0}")]
    Split(String),

    #[error("sequence `{0}` not found in lookup table")]
    LookupMiss(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
