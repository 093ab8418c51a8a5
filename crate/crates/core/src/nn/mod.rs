//! Differentiable numerics: tensors, the autodiff tape, layers and optimizers.

pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use graph::{
    focal_grad, focal_value, gelu, log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, softplus,
    Gradients, Graph, Var,
};
pub use optim::{adam_step, cosine_lr, per_example_clip, AdamState, OptimizerConfig};
pub use params::{init, ParamStore};
pub use tensor::Tensor;
