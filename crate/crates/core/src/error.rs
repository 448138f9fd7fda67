use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("2x2 pooling needs even spatial dims, got {height}x{width}")]
    OddSpatialDim { height: usize, width: usize },

    #[error("unsupported convolution spec: {0}")]
    UnsupportedSpec(String),

    #[error("class count must be at least 2, got {0}")]
    InvalidClassCount(usize),

    #[error("network input must be Bx3xHxW with H and W divisible by 8, got {0}")]
    BadInputShape(Shape),

    #[error("loss gradient shape {got} does not match recorded output {expected}")]
    TapeMismatch { expected: Shape, got: Shape },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("confusion matrix holds no scored pixels")]
    EmptyMatrix,

    #[error("not a weight archive (bad magic)")]
    BadMagic,

    #[error("unsupported archive version {0}")]
    VersionUnsupported(u32),

    #[error("archive checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("archive entry `{name}` does not fit the network: {detail}")]
    ShapeMismatchOnLoad { name: String, detail: String },

    #[error("malformed archive: {0}")]
    MalformedArchive(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
