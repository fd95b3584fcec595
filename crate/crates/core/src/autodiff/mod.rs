//! Minimal tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every primitive validates shapes before running and refuses to record a
//! non-finite result, so instabilities surface as errors instead of silently
//! corrupting parameters.

mod check;
mod graph;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{matmul, pairwise_cosine, pairwise_euclidean, Tensor};

#[cfg(test)]
mod tests;
