//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every forward op with its output value. Parameters
//! live in a [`ParamStore`]; [`Graph::backward`] accumulates their gradients
//! there and the optimizers consume them.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck, GRAD_FLOOR};
pub use graph::{softmax, Graph, Var};
pub use optim::{
    adam_step, sgd_step, AdamConfig, AdamState, NamedTensor, ParamId, ParamStore, Parameter,
};
pub use tensor::Tensor;
