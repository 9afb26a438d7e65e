//! Exit codes and the one-line error report.

use std::fmt;
use std::path::Path;

use patlm::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn input(path: &Path, err: &std::io::Error) -> Self {
        Failure {
            code: EXIT_INPUT,
            kind: if err.kind() == std::io::ErrorKind::NotFound {
                "input_missing"
            } else {
                "input_unreadable"
            },
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn checksum(path: &Path, expected: &str, actual: &str) -> Self {
        Failure {
            code: EXIT_INPUT,
            kind: "checksum_mismatch",
            message: format!("{}: manifest records {expected}, file has {actual}", path.display()),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            kind: "non_finite",
            message: message.into(),
        }
    }

    pub fn output(path: &Path, err: &std::io::Error) -> Self {
        Failure {
            code: EXIT_INPUT,
            kind: "output_unwritable",
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::InvalidArgument(_) => (EXIT_CONFIG, "config"),
            Error::CorpusTooSmall { .. } => (EXIT_CONFIG, "corpus_too_small"),
            Error::NonFinite(_) => (EXIT_NUMERIC, "non_finite"),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                (EXIT_INPUT, "input_missing")
            }
            Error::Io { .. } => (EXIT_INPUT, "input_unreadable"),
            _ => (EXIT_INPUT, "input_invalid"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "error code={} kind={} message={:?}", self.code, self.kind, msg)
    }
}
