//! Dense tensors, reverse-mode autodiff, AdamW and the learning-rate schedule.

mod graph;
mod gradcheck;
mod optim;
mod params;
mod random;
mod scalar;
mod schedule;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{adamw_step, decays, AdamWConfig, OptimizerState};
pub use params::{accumulate, scale_grads, Binder, ParamGrads, ParamStore};
pub use random::{derive_seed, fan_in_uniform, rng_from_seed, truncated_normal, SeededRng};
pub use scalar::Scalar;
pub use schedule::Schedule;
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

/// Elementwise `x * Phi(x)` on a plain value.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
