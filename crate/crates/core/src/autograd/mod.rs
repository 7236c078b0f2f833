//! Minimal tensor and reverse-mode differentiation engine used by the model,
//! the retriever and the gradient checks.

mod graph;
mod params;
mod tensor;

pub use graph::{bce_clamp_count, softmax_rows, Gradients, Graph, Var};
pub use params::{normal, uniform, xavier, GradStore, ParamId, ParamStore};
pub use tensor::{gemm, Real, Tensor, View};
