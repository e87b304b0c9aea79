//! Dense arrays with reverse-mode differentiation.
//!
//! Everything the toy transformer, the token scorers and gradient×input
//! saliency need: matmul, elementwise primitives, row softmax, layer norm,
//! embedding gather, fused masked attention, fused cross-entropy, a
//! straight-through Gumbel keep decision and a pairwise logistic ranking
//! term. Each [`Tape`] belongs to one forward pass.

pub(crate) mod attention;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use real::Real;
pub use tape::{gelu, gelu_grad, RankPair, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MathError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("backward needs a 0-dimensional tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
