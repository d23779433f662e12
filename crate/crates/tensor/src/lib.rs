//! Dense tensors and a reverse-mode autodiff tape for small convolutional models.

mod conv;
mod error;
mod graph;
mod scalar;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeom};
pub use error::{Result, TensorError};
pub use graph::{Grads, Graph, Var};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
