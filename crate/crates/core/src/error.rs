use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("invalid model file: {0}")]
    InvalidModel(String),

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image of {height}x{width} is smaller than the required {min_height}x{min_width}")]
    TooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },

    /// A NaN or infinity surfaced in a loss, gradient or activation.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
