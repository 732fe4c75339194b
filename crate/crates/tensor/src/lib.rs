//! Dense CPU tensors with a tape-based reverse-mode autodiff.
//!
//! Only the operations needed by convolutional encoder–decoder training are
//! provided: convolution, instance normalization, pooling, nearest
//! upsampling, clamping, Gram matrices and mean-squared error. Kernels run
//! single-threaded with a fixed accumulation order, so results are bitwise
//! reproducible for a given input.

pub mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}
