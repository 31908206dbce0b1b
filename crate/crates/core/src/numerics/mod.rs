//! Tensors, differentiable primitives and gradient verification.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use param::{Param, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
