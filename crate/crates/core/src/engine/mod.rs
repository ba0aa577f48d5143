//! Dense `f64` tensors with exact reverse-mode gradients for the fixed op set
//! the transformer needs.

mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{cross_entropy, layer_norm, matmul, row_softmax, Gradients, Graph, Segment, Var};
pub use tensor::{AdamConfig, ParamId, ParameterStore, Tensor};
