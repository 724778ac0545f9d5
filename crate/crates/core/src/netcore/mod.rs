//! Dense tensors, a reverse-mode tape and small fully connected classifiers.

mod finite_diff;
mod graph;
mod model;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error, RELATIVE_ERROR_FLOOR};
pub use graph::{sign, Gradients, Graph, Var};
pub(crate) use graph::{log_sum_exp, population_std};
pub use model::{
    forward_logits, grad_input, grad_params, init_model, predict_label, predict_labels, Activation,
    ModelSpec, ModelState, Network, ParamVector, Segment,
};
pub(crate) use model::unit_f64;
pub use tensor::{argmax, Tensor};
