use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },

    #[error("channel range {start}..{} out of bounds for {channels} channels", start + len)]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },

    #[error("zero-sized spatial extent in {0}")]
    EmptySpatial(Shape),

    #[error("{0}: empty input list")]
    Empty(&'static str),

    #[error("convolution: {0}")]
    Conv(String),

    #[error("backward called on non-scalar output {0}")]
    NonScalarLoss(Shape),
}

pub type Result<T> = std::result::Result<T, TensorError>;
