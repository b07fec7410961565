//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are bound into a graph as leaves; after
//! [`Graph::backward`] the gradients of trainable parameters are read back
//! with [`Gradients::param_grads`].

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_params, grad_check_with, relative_error, ParamCheckReport,
};
pub use graph::{ConvSpec, Gradients, Graph, OpKind, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

#[cfg(test)]
mod tests;
