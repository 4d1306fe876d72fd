//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors/images that must agree in shape do not.
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument is outside its documented range.
    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// A gradient or loss became NaN/Inf.
    #[error("{op}: non-finite value encountered in {what}")]
    NonFinite { op: &'static str, what: String },

    /// Stored file exists but its contents are not what the format promises.
    #[error("corrupt {what} in {path}: {msg}")]
    Corrupt {
        what: &'static str,
        path: String,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
