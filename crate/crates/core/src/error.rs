use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LrcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LrcError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    Version(u32),

    #[error("unexpected checkpoint kind: expected {expected}, found {found}")]
    Kind { expected: String, found: String },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LrcError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LrcError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LrcError::Io {
            path: path.into(),
            source,
        }
    }
}
