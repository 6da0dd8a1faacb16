use std::io;
use std::path::PathBuf;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, thiserror::Error)]
pub enum SlmError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training aborted: {0}")]
    Abort(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = SlmError> = std::result::Result<T, E>;

impl SlmError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SlmError::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        SlmError::Data(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        SlmError::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        SlmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 1 for data/IO problems, 2 for
    /// contract, format and configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            SlmError::Data(_) | SlmError::Io { .. } | SlmError::Abort(_) => 1,
            _ => 2,
        }
    }
}
