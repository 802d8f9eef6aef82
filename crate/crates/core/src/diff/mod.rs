//! Dense tensors and a reverse-mode differentiation tape.

mod attention;
mod gradcheck;
mod graph;
mod tensor;

pub use attention::{multi_head_attention, AttentionOutput, AttentionParams};
pub use gradcheck::{grad_check, grad_check_with, GradCheck, GradCheckOptions};
pub use graph::{sigmoid, Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::softmax_in_place;
