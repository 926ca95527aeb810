//! A compact reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Everything runs on a single logical stream in 64-bit precision, so a
//! forward/backward pass is bit-for-bit reproducible given the same inputs
//! and parameters. Model code builds a fresh [`Graph`] per step, pulls
//! parameters out of a [`ParamStore`], and calls [`Graph::backward`] on a
//! scalar loss.

mod conv;
mod graph;
pub mod gradcheck;
pub mod init;
mod linalg;
mod norm;
mod ops;
pub mod optim;
mod param;
mod tensor;

pub use graph::{BackwardCtx, Gradients, Graph, Grads, Var};
pub use linalg::gemm;
pub use norm::BatchStats;
pub use conv::attention_weights;
pub use ops::softmax_rows_inplace;
pub use param::{ParamId, ParamStore};
pub use tensor::Tensor;
