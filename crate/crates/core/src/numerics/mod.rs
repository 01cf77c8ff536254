//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its value,
//! its parents, and enough context to replay the chain rule in reverse.
//! [`Tensor`]s outside a graph are plain data and can move freely between
//! threads; graphs themselves are single-threaded and dropped after each
//! training step.

mod ops;
mod optim;
mod rng;
mod tensor;

pub use optim::{adamw_step, cosine_lr, OptimizerState, Param, ParamSet};
pub use rng::{rand_range, randn_vec, rng_from_seed, Rng};
pub use tensor::{numel, sinusoidal_embedding, Graph, Tensor, Var};
