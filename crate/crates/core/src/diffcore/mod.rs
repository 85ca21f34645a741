//! Minimal reverse-mode differentiation substrate.
//!
//! Provides dense row-major tensors, a named parameter store and a
//! define-by-run [`Graph`] with exactly the operations the speech and text
//! models need: matrix products, elementwise arithmetic, affine maps,
//! embedding lookup, layer normalization, GELU, stable (log-)softmax,
//! masked multi-head attention, strided time convolution, cross-entropy,
//! row concatenation/slicing and the CTC loss.
//!
//! Use `f64` for gradient checks and oracles; `f32` is fine for training.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{log_softmax_rows, softmax_rows, AttnMask, Graph, Var};
pub use real::{gemm, matmul_nn, matmul_nt, DType, Layout, Real};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor};
