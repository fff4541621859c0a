use thiserror::Error;

/// Errors raised by model loading, inference and the CAM kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("malformed model header: {0}")]
    Header(String),
    #[error("tensor `{name}` expects {expected} bytes, found {found}")]
    ByteLength {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced")]
    NonFinite,
    #[error("softmax of an empty vector")]
    EmptyLogits,
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("image has a zero dimension ({width}x{height})")]
    EmptyImage { width: u32, height: u32 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}
