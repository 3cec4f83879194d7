//! Reverse-mode automatic differentiation over dense `[N, C, H, W]` tensors
//! of `f64`, sized for CPU training of small convolutional networks and for
//! double-precision finite-difference verification.

mod conv;
mod error;
mod graph;
mod param;
mod tensor;

pub mod testing;

pub use conv::{conv2d_backward, conv2d_forward, output_shape as conv_output_shape, ConvGrads, ConvSpec};
pub use error::{Result, TensorError};
pub use graph::{sigmoid, CustomOp, Gradients, Graph, Var, GROUP_NORM_EPS};
pub use param::{kaiming_uniform, ParamId, ParamStore};
pub use tensor::{resize_area, resize_bilinear, Shape, Tensor};
