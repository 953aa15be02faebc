//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! The primitive set is deliberately small: element-wise arithmetic, `log`,
//! `sigmoid`, `relu`, explicit broadcasting, reductions, 2-D convolution,
//! 2x2 max pooling, nearest upsampling, concatenation, slicing and a channel
//! softmax. That covers the segmentation network and every count-statistics
//! loss in this crate.

mod check;
mod graph;
mod kernels;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid as logistic;
