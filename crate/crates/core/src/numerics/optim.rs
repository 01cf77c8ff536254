//! Named parameter sets, AdamW, and the warmup-cosine LR schedule.

use crate::error::{CoreError, Result};
use crate::numerics::tensor::Tensor;

/// One learnable tensor with a stable name (used by checkpoints and
/// per-group gradient checks).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Order is the registration order
/// and is part of the determinism contract.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor as a learnable parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        value.requires_grad = true;
        self.entries.push(Param { name, value });
        self.entries.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.value.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }
}

/// AdamW state: decoupled weight decay plus bias-corrected moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step_count: usize,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(
        params: &ParamSet,
        lr: f64,
        betas: (f64, f64),
        eps: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&betas.0) || !(0.0..1.0).contains(&betas.1) {
            return Err(CoreError::invalid(format!("betas out of [0,1): {betas:?}")));
        }
        if eps <= 0.0 {
            return Err(CoreError::invalid(format!("eps must be positive, got {eps}")));
        }
        Ok(OptimizerState {
            step_count: 0,
            first_moment: params.entries.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second_moment: params.entries.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            lr,
            betas,
            eps,
            weight_decay,
        })
    }
}

/// One AdamW update over every parameter. Weight decay is decoupled: it
/// shrinks the parameter directly instead of entering the moments.
pub fn adamw_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(CoreError::invalid(format!(
            "optimizer state covers {} parameters, set has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = state.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.entries.iter_mut().enumerate() {
        let grad = p.value.grad.as_ref().ok_or_else(|| {
            CoreError::invalid(format!("adamw_step: parameter '{}' has no gradient", p.name))
        })?;
        debug_assert_eq!(grad.len(), state.first_moment[i].len());
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..grad.len() {
            let g = grad[j];
            if state.weight_decay != 0.0 {
                p.value.data[j] -= state.lr * state.weight_decay * p.value.data[j];
            }
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.value.data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay
/// to zero at `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(CoreError::invalid(format!(
            "cosine_lr: warmup {warmup_steps} exceeds total {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(CoreError::invalid(format!(
            "cosine_lr: step {step} exceeds total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
