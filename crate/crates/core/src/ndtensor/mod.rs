//! Dense tensors with a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Graph`]: wrap tensors as leaves ([`Graph::param`] for gradient-tracking
//! leaves, [`Graph::constant`] otherwise), chain operations on the returned
//! [`Var`] handles and call [`Graph::backward`] on a scalar result.
//!
//! Every operation checks shapes eagerly and rejects NaN/Inf outputs. There
//! is no broadcasting apart from the per-channel bias.

mod conv;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{BackwardOp, Gradients, Graph, Var};
pub use ops::NORM_EPS;

pub use tensor::{Real, Tensor};
pub(crate) use tensor::gemm;
