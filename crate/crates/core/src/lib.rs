//! Coupled action/next-observation diffusion with independent per-modality
//! timesteps, at a scale where every claim is checkable on a laptop.
//!
//! The crate provides:
//! - a minimal f64 tensor engine with reverse-mode autodiff ([`numerics`]),
//! - diffusion noise schedules and the forward process ([`schedule`]),
//! - the coupled score network: an AdaLN transformer over action tokens,
//!   observation patch tokens, and register tokens ([`netarch`]),
//! - the decoupled-timestep training objective and loop ([`training`]),
//! - reverse-process samplers and the four inference modes — policy, video
//!   prediction, forward dynamics, inverse dynamics ([`inference`]),
//! - a deterministic toy pushing environment with a scripted bimodal
//!   expert ([`envlab`]),
//! - closed-form Gaussian-mixture denoisers used as exact ground truth for
//!   the samplers ([`oracle`]),
//! - baselines, experiment recipes, and reporting ([`harness`]).

pub mod data;
pub mod envlab;
pub mod error;
pub mod harness;
pub mod inference;
pub mod netarch;
pub mod numerics;
pub mod oracle;
pub mod schedule;
pub mod training;

pub use error::{CoreError, Result};
