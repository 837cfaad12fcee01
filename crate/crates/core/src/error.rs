use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: Vec<u8>,
    },

    #[error("truncated {what}: needed {needed} more bytes at offset {offset}")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
    },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("unsupported {what} version {version}")]
    Version { what: &'static str, version: u32 },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("optimization diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("base fingerprint mismatch: artifact expects {expected}, base is {actual}")]
    Fingerprint { expected: String, actual: String },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 3 for data problems, 4 for
    /// numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
