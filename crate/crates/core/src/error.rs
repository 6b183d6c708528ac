use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or array had the wrong extent along some axis.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    /// Caller violated an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("failed to load {}{}: {message}", .file.display(), .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Load {
        file: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by the data or
    /// the caller. The CLI maps these to exit code 2.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) | Error::MissingFile(_) => true,
            Error::Image(image::ImageError::IoError(_)) => true,
            Error::Wav(hound::Error::IoError(_)) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
