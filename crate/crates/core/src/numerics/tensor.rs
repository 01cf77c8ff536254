//! Tensor storage and the reverse-mode graph.

use crate::error::{CoreError, Result};
use crate::numerics::ops::Op;
use crate::numerics::rng::{randn_vec, Rng};

/// Dense row-major f64 tensor. Plain data — graph structure lives in [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(CoreError::invalid(format!(
                "tensor: shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            data: vec![value; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        Tensor {
            data: randn_vec(numel(shape), rng),
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Leaf that participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let mut t = Tensor::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulates `g` into this tensor's grad field.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(existing) => {
                for (e, gi) in existing.iter_mut().zip(g) {
                    *e += gi;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
    pub parents: Vec<Var>,
}

/// Wengert list. Ops append nodes; `backward` walks the list in reverse.
///
/// Construction order is the topological order, so no explicit sort is
/// needed and gradient accumulation is deterministic.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        parents: Vec<Var>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
            parents,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor into the graph as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad,
            grad: None,
            op: Op::Leaf,
            parents: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from raw data that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(CoreError::invalid(format!(
                "constant: shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        self.nodes.push(Node {
            shape,
            data,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
            parents: Vec::new(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every node gradient (leaves included).
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse pass from a scalar loss. Accumulates into node grads, so a
    /// second call without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(CoreError::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                n.shape
            )));
        }
        if !n.requires_grad {
            // Nothing in the graph needs gradients; a no-op by contract.
            return Ok(());
        }
        // Work table for this pass; merged into node grads at the end so a
        // repeated backward accumulates exactly one extra pass.
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if work[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let grad_out = work[idx].as_ref().expect("grad present");
            let contributions = {
                let node = &self.nodes[idx];
                node.op.backward(grad_out, node, &self.nodes)?
            };
            for (parent, contrib) in self.nodes[idx].parents.iter().zip(contributions) {
                if let Some(c) = contrib {
                    if self.nodes[parent.0].requires_grad {
                        match &mut work[parent.0] {
                            Some(g) => {
                                for (gi, ci) in g.iter_mut().zip(&c) {
                                    *gi += ci;
                                }
                            }
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
        }
        for (idx, w) in work.into_iter().enumerate() {
            if let Some(w) = w {
                if self.nodes[idx].requires_grad {
                    match &mut self.nodes[idx].grad {
                        Some(g) => {
                            for (gi, wi) in g.iter_mut().zip(&w) {
                                *gi += wi;
                            }
                        }
                        slot @ None => *slot = Some(w),
                    }
                }
            }
        }
        Ok(())
    }

    /// Copies a node's accumulated grad back into a tensor (additively).
    pub fn write_grad_to(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Sinusoidal position/timestep features: `dim/2` sine then `dim/2` cosine
/// channels with log-spaced frequencies over `max_period`.
pub fn sinusoidal_embedding(t: f64, dim: usize, max_period: f64) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
