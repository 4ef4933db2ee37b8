//! Dense arrays and reverse-mode differentiation for the layer set of the
//! echo canceller: causal convolution, transposed convolution, batch norm,
//! ELU/sigmoid/softmax, GRU, frequency max-pooling, affine projection, the
//! delay-attention ops and the differentiable STFT pair used by the loss.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, GradCheck};
pub use graph::{compress, BnBatchStats, BnMode, Graph, Var, COMPRESSION_EPS};
pub use tensor::Tensor;
