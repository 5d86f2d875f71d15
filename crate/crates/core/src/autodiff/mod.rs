//! Minimal reverse-mode automatic differentiation over dense real tensors.
//!
//! The operator set is exactly what the enhancement network needs:
//! element-wise maps, batched matrix products, 2-D convolutions and their
//! adjoints, pooling, concatenation and slicing, reductions, complex
//! magnitudes and the magnitude softmax of the channel-attention unit.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_subset, rel_error, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Elementwise, LinearOp, NodeGrads, Pad2d, PoolKind, Reduction, Tape, Var};
