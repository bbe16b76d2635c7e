//! Dense tensors and reverse-mode differentiation over a fixed operator set.

mod gradcheck;
mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{
    l2_normalize, select, Bindings, Forward, Gradients, Graph, GraphBuilder, NodeId, Op, NORM_EPS,
};
pub use tensor::Tensor;

/// Named parameter (or input) tensors.
pub type ParamStore = BTreeMap<String, Tensor>;
