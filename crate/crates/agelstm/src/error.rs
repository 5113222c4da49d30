//! Error type shared across the crate.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// A model or operator was built with inconsistent shapes/settings.
    Config(String),
    /// A runtime input (label, image, region, record) violates a precondition.
    Input(String),
    /// The caller used an API out of contract (non-scalar loss, missing base checkpoint, ...).
    Usage(String),
    /// A manifest line failed to parse.
    Parse { line: usize, msg: String },
    /// A manifest parsed but violates a dataset invariant.
    Validation(String),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, batch: usize },
    /// Checkpoint magic/version did not match.
    CheckpointVersion { found: u32, expected: u32 },
    /// Checkpoint file ended mid-record.
    CheckpointTruncated,
    /// Checkpoint tensor shapes disagree with its embedded config.
    CheckpointShape(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
            }
            Error::CheckpointVersion { found, expected } => {
                write!(f, "checkpoint version mismatch: found {found}, expected {expected}")
            }
            Error::CheckpointTruncated => write!(f, "checkpoint file is truncated"),
            Error::CheckpointShape(msg) => write!(f, "checkpoint shape mismatch: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
