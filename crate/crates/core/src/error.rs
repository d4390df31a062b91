use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class name, stable across releases.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Param(_) => "param",
            Error::Data(_) => "data",
            Error::Contract(_) => "contract",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "missing_file"
            }
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint_version",
        }
    }

    /// Process exit code for the error class. Zero is never returned.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "missing_file" => 2,
            "io" => 3,
            "config" => 4,
            "checkpoint" => 5,
            "checkpoint_version" => 6,
            "data" => 7,
            "shape" | "param" => 8,
            _ => 1,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Param(format!($($arg)*)) };
}
pub(crate) use param_err;
pub(crate) use shape_err;
