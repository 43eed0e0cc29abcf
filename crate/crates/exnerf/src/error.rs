use std::path::Path;

/// Library-wide error type. Variants map onto the CLI exit codes:
/// invalid arguments and unsupported formats exit 2, numeric divergence
/// exits 3, I/O failures exit 4.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("training divergence: {0}")]
    Divergence(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::State(_) | Error::UnsupportedFormat(_) => 2,
            Error::Divergence(_) => 3,
            Error::Io { .. } | Error::Image(_) | Error::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
