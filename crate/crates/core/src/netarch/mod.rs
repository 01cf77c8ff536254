//! The coupled score network: a small AdaLN diffusion transformer over
//! action tokens, spatiotemporal observation patch tokens, and register
//! tokens, conditioned on encoded current observations and the two
//! modality timesteps.
//!
//! The same code also builds the baseline variants used by the harness:
//! an action-only tower (observation path ablated), a shared-timestep
//! joint model, and a regression model with learned query tokens.

mod checkpoint;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::inference::NoisePredictor;
use crate::numerics::{
    randn_vec, sinusoidal_embedding, Graph, ParamSet, Rng, Tensor, Var,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetVariant {
    /// Full coupled model with independent timesteps.
    Uwm,
    /// Action diffusion only: observation tokens, observation timestep, and
    /// registers removed.
    ActionOnly,
    /// Joint diffusion with a single shared timestep; the one embedding is
    /// duplicated so the conditioning width matches the coupled model.
    SharedTimestep,
    /// No diffusion: learned query tokens regress `(a, o')` directly.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UwmConfig {
    /// (H, W, C) of a single frame.
    pub image_hwc: (usize, usize, usize),
    /// Frames per observation stack (h_o).
    pub obs_history: usize,
    /// Actions per chunk (h_a).
    pub action_horizon: usize,
    /// Dimension of one action (d_a).
    pub action_dim: usize,
    /// Camera views (n_c).
    pub num_views: usize,
    /// Spatiotemporal patch shape (p_h, p_w, p_t).
    pub patch: (usize, usize, usize),
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_registers: usize,
    pub timestep_embed_dim: usize,
}

impl UwmConfig {
    /// Desk-scale default used by the toy manipulation task.
    pub fn toy() -> Self {
        UwmConfig {
            image_hwc: (16, 16, 1),
            obs_history: 2,
            action_horizon: 4,
            action_dim: 2,
            num_views: 1,
            patch: (4, 4, 2),
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_registers: 8,
            timestep_embed_dim: 64,
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// finite-difference gradient checks.
    pub fn tiny() -> Self {
        UwmConfig {
            image_hwc: (8, 8, 1),
            obs_history: 2,
            action_horizon: 2,
            action_dim: 2,
            num_views: 1,
            patch: (4, 4, 2),
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 4.0,
            num_registers: 2,
            timestep_embed_dim: 16,
        }
    }

    /// Configuration for the mixture-distribution task: 4x4 single-frame
    /// observations, two-step action chunks.
    pub fn oracle_task() -> Self {
        UwmConfig {
            image_hwc: (4, 4, 1),
            obs_history: 1,
            action_horizon: 2,
            action_dim: 2,
            num_views: 1,
            patch: (4, 4, 1),
            embed_dim: 64,
            depth: 3,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_registers: 4,
            timestep_embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, _c) = self.image_hwc;
        let (ph, pw, pt) = self.patch;
        if h == 0 || w == 0 || self.image_hwc.2 == 0 {
            return Err(CoreError::Config("image dims must be positive".into()));
        }
        if ph == 0 || pw == 0 || pt == 0 || h % ph != 0 || w % pw != 0 || self.obs_history % pt != 0
        {
            return Err(CoreError::Config(format!(
                "patch {:?} must divide (H, W, h_o) = ({h}, {w}, {})",
                self.patch, self.obs_history
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.timestep_embed_dim % 2 != 0 {
            return Err(CoreError::Config("timestep_embed_dim must be even".into()));
        }
        if self.action_horizon == 0 || self.action_dim == 0 {
            return Err(CoreError::Config("action shape must be positive".into()));
        }
        Ok(())
    }

    /// Flattened size of one observation stack `[n_c, h_o, H, W, C]`.
    pub fn obs_numel(&self) -> usize {
        let (h, w, c) = self.image_hwc;
        self.num_views * self.obs_history * h * w * c
    }

    /// Flattened size of one action chunk `[h_a, d_a]`.
    pub fn action_numel(&self) -> usize {
        self.action_horizon * self.action_dim
    }

    pub fn obs_shape(&self) -> Vec<usize> {
        let (h, w, c) = self.image_hwc;
        vec![self.num_views, self.obs_history, h, w, c]
    }

    pub fn num_obs_tokens(&self) -> usize {
        let (h, w, _) = self.image_hwc;
        let (ph, pw, pt) = self.patch;
        self.num_views * (self.obs_history / pt) * (h / ph) * (w / pw)
    }

    pub fn patch_volume(&self) -> usize {
        let (ph, pw, pt) = self.patch;
        ph * pw * pt * self.image_hwc.2
    }
}

/// Encoder channel plan: three stride-2 convolutions from C to 32 channels.
const ENC_CHANNELS: [usize; 3] = [8, 16, 32];

fn conv_out(n: usize) -> usize {
    // k=3, stride=2, pad=1.
    n.div_ceil(2)
}

fn encoder_flat_dim(cfg: &UwmConfig) -> usize {
    let (h, w, _) = cfg.image_hwc;
    let (h3, w3) = (conv_out(conv_out(conv_out(h))), conv_out(conv_out(conv_out(w))));
    ENC_CHANNELS[2] * h3 * w3
}

pub struct UwmNet {
    pub cfg: UwmConfig,
    pub variant: NetVariant,
    pub params: ParamSet,
    /// Patchify/unpatchify permutations keyed by batch size.
    perm_cache: RefCell<HashMap<usize, (Arc<Vec<usize>>, Arc<Vec<usize>>)>>,
}

impl Clone for UwmNet {
    fn clone(&self) -> Self {
        UwmNet {
            cfg: self.cfg,
            variant: self.variant,
            params: self.params.clone(),
            perm_cache: RefCell::new(HashMap::new()),
        }
    }
}

/// Per-graph binding of every parameter to a leaf [`Var`], index-aligned
/// with `params.entries`.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Outputs of a batched forward pass.
pub struct ForwardOutput {
    /// `[B, h_a, d_a]` noise prediction (or direct regression output).
    pub eps_a: Var,
    /// `[B, n_c, h_o, H, W, C]` noise prediction; absent for `ActionOnly`.
    pub eps_o: Option<Var>,
    /// Output of the last transformer block, `[B, S, D]`. Register slots of
    /// this tensor receive no gradient from the heads.
    pub final_tokens: Var,
}

impl UwmNet {
    pub fn variant_has_obs_tokens(variant: NetVariant) -> bool {
        !matches!(variant, NetVariant::ActionOnly)
    }

    fn has_obs_tokens(&self) -> bool {
        Self::variant_has_obs_tokens(self.variant)
    }

    fn has_registers(&self) -> bool {
        self.has_obs_tokens() && self.cfg.num_registers > 0
    }

    fn has_mask_token(&self) -> bool {
        matches!(
            self.variant,
            NetVariant::SharedTimestep | NetVariant::Regression
        )
    }

    pub fn seq_len(&self) -> usize {
        let mut s = self.cfg.action_horizon;
        if self.has_obs_tokens() {
            s += self.cfg.num_obs_tokens();
        }
        if self.has_registers() {
            s += self.cfg.num_registers;
        }
        s
    }

    pub fn cond_dim(&self) -> usize {
        let feat = self.cfg.num_views * self.cfg.obs_history * self.cfg.embed_dim;
        match self.variant {
            NetVariant::Uwm | NetVariant::SharedTimestep => {
                feat + 2 * self.cfg.timestep_embed_dim
            }
            NetVariant::ActionOnly => feat + self.cfg.timestep_embed_dim,
            NetVariant::Regression => feat,
        }
    }

    /// Builds a network with freshly initialized parameters. The parameter
    /// list (names, shapes, values) is a pure function of
    /// `(cfg, variant, seed)`.
    pub fn new(cfg: UwmConfig, variant: NetVariant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::numerics::rng_from_seed(seed);
        let mut params = ParamSet::new();
        let d = cfg.embed_dim;
        let (_, _, c) = cfg.image_hwc;
        let td = cfg.timestep_embed_dim;

        let add = |params: &mut ParamSet, name: String, shape: Vec<usize>, std: f64, rng: &mut Rng| {
            let data = if std == 0.0 {
                vec![0.0; shape.iter().product()]
            } else {
                randn_vec(shape.iter().product(), rng)
                    .into_iter()
                    .map(|x| x * std)
                    .collect()
            };
            params.add(name, Tensor::new(data, shape).expect("shape"));
        };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let xavier = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

        // Observation encoder (always present: every variant conditions on o).
        let chans = [c, ENC_CHANNELS[0], ENC_CHANNELS[1], ENC_CHANNELS[2]];
        for l in 0..3 {
            add(&mut params, format!("enc.conv{}.w", l + 1), vec![chans[l + 1], chans[l], 3, 3], he(chans[l] * 9), &mut rng);
            add(&mut params, format!("enc.conv{}.b", l + 1), vec![chans[l + 1]], 0.0, &mut rng);
        }
        let flat = encoder_flat_dim(&cfg);
        add(&mut params, "enc.proj.w".into(), vec![flat, d], he(flat), &mut rng);
        add(&mut params, "enc.proj.b".into(), vec![d], 0.0, &mut rng);

        // Action token MLP (diffusion variants encode the noisy chunk).
        if !matches!(variant, NetVariant::Regression) {
            add(&mut params, "act.mlp1.w".into(), vec![cfg.action_dim, d], he(cfg.action_dim), &mut rng);
            add(&mut params, "act.mlp1.b".into(), vec![d], 0.0, &mut rng);
            add(&mut params, "act.mlp2.w".into(), vec![d, d], he(d), &mut rng);
            add(&mut params, "act.mlp2.b".into(), vec![d], 0.0, &mut rng);
        }

        // Observation patch projection.
        if Self::variant_has_obs_tokens(variant) && !matches!(variant, NetVariant::Regression) {
            let pv = cfg.patch_volume();
            add(&mut params, "patch.proj.w".into(), vec![pv, d], he(pv), &mut rng);
            add(&mut params, "patch.proj.b".into(), vec![d], 0.0, &mut rng);
        }

        // Shared sinusoidal timestep MLP.
        if !matches!(variant, NetVariant::Regression) {
            add(&mut params, "time.mlp1.w".into(), vec![td, td], he(td), &mut rng);
            add(&mut params, "time.mlp1.b".into(), vec![td], 0.0, &mut rng);
            add(&mut params, "time.mlp2.w".into(), vec![td, td], he(td), &mut rng);
            add(&mut params, "time.mlp2.b".into(), vec![td], 0.0, &mut rng);
        }

        if matches!(variant, NetVariant::Regression) {
            add(&mut params, "query.action".into(), vec![cfg.action_horizon, d], 0.02, &mut rng);
            add(&mut params, "query.obs".into(), vec![cfg.num_obs_tokens(), d], 0.02, &mut rng);
        }
        if matches!(variant, NetVariant::SharedTimestep | NetVariant::Regression) {
            add(&mut params, "mask_token".into(), vec![d], 0.02, &mut rng);
        }
        if Self::variant_has_obs_tokens(variant) && cfg.num_registers > 0 {
            add(&mut params, "registers".into(), vec![cfg.num_registers, d], 0.02, &mut rng);
        }

        // Positional embedding covers every token slot, registers included.
        let seq_len = {
            let mut s = cfg.action_horizon;
            if Self::variant_has_obs_tokens(variant) {
                s += cfg.num_obs_tokens() + cfg.num_registers;
            }
            s
        };
        add(&mut params, "pos".into(), vec![seq_len, d], 0.02, &mut rng);

        let cond_dim = {
            let feat = cfg.num_views * cfg.obs_history * d;
            match variant {
                NetVariant::Uwm | NetVariant::SharedTimestep => feat + 2 * td,
                NetVariant::ActionOnly => feat + td,
                NetVariant::Regression => feat,
            }
        };
        let hidden = (d as f64 * cfg.mlp_ratio) as usize;
        for i in 0..cfg.depth {
            add(&mut params, format!("blocks.{i}.qkv.w"), vec![d, 3 * d], xavier(d), &mut rng);
            add(&mut params, format!("blocks.{i}.qkv.b"), vec![3 * d], 0.0, &mut rng);
            add(&mut params, format!("blocks.{i}.attn_out.w"), vec![d, d], xavier(d), &mut rng);
            add(&mut params, format!("blocks.{i}.attn_out.b"), vec![d], 0.0, &mut rng);
            add(&mut params, format!("blocks.{i}.mlp1.w"), vec![d, hidden], he(d), &mut rng);
            add(&mut params, format!("blocks.{i}.mlp1.b"), vec![hidden], 0.0, &mut rng);
            add(&mut params, format!("blocks.{i}.mlp2.w"), vec![hidden, d], he(hidden), &mut rng);
            add(&mut params, format!("blocks.{i}.mlp2.b"), vec![d], 0.0, &mut rng);
            // Zero-initialized modulation: blocks start as identities.
            add(&mut params, format!("blocks.{i}.mod.w"), vec![cond_dim, 6 * d], 0.0, &mut rng);
            add(&mut params, format!("blocks.{i}.mod.b"), vec![6 * d], 0.0, &mut rng);
        }

        add(&mut params, "head.action.w".into(), vec![d, cfg.action_dim], 0.02, &mut rng);
        add(&mut params, "head.action.b".into(), vec![cfg.action_dim], 0.0, &mut rng);
        if Self::variant_has_obs_tokens(variant) {
            add(&mut params, "head.obs.w".into(), vec![d, cfg.patch_volume()], 0.02, &mut rng);
            add(&mut params, "head.obs.b".into(), vec![cfg.patch_volume()], 0.0, &mut rng);
        }

        Ok(UwmNet {
            cfg,
            variant,
            params,
            perm_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Adds N(0, std) noise to every parameter; used by gradient checks to
    /// move off the zero-modulation initialization point.
    pub fn jitter_params(&mut self, std: f64, rng: &mut Rng) {
        for p in &mut self.params.entries {
            let noise = randn_vec(p.value.numel(), rng);
            for (x, n) in p.value.data.iter_mut().zip(noise) {
                *x += std * n;
            }
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.entries.iter().map(|p| g.leaf(&p.value)).collect(),
        }
    }

    /// Accumulates graph gradients back into the parameter tensors.
    pub fn apply_grads(&mut self, g: &Graph, bound: &BoundParams) {
        for (i, var) in bound.vars.iter().enumerate() {
            g.write_grad_to(*var, &mut self.params.entries[i].value);
        }
    }

    fn p(&self, bound: &BoundParams, name: &str) -> Var {
        let idx = self
            .params
            .entries
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        bound.vars[idx]
    }

    fn linear(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Encodes an observation stack `[B, n_c, h_o, H, W, C]` into a single
    /// conditioning feature vector `[B, n_c * h_o * embed_dim]`.
    pub fn encode_observation(&self, g: &mut Graph, bound: &BoundParams, obs: Var) -> Result<Var> {
        let sh = g.shape(obs).to_vec();
        let want = self.cfg.obs_shape();
        if sh.len() != 6 || sh[1..] != want[..] {
            return Err(CoreError::ShapeMismatch {
                op: "encode_observation",
                lhs: sh,
                rhs: want,
            });
        }
        let b = sh[0];
        let (h, w, c) = self.cfg.image_hwc;
        let frames = b * self.cfg.num_views * self.cfg.obs_history;
        let x = g.reshape(obs, &[frames, h, w, c])?;
        let mut x = g.permute(x, &[0, 3, 1, 2])?; // NHWC -> NCHW
        for l in 1..=3 {
            let wv = self.p(bound, &format!("enc.conv{l}.w"));
            let bv = self.p(bound, &format!("enc.conv{l}.b"));
            // Bias is added inside conv2d.
            let pre = g.conv2d(x, wv, bv, 2, 1)?;
            x = g.silu(pre);
        }
        let flat = encoder_flat_dim(&self.cfg);
        let x = g.reshape(x, &[frames, flat])?;
        let proj_w = self.p(bound, "enc.proj.w");
        let proj_b = self.p(bound, "enc.proj.b");
        let feat = self.linear(g, x, proj_w, proj_b)?;
        g.reshape(
            feat,
            &[b, self.cfg.num_views * self.cfg.obs_history * self.cfg.embed_dim],
        )
    }

    /// Shared sinusoidal timestep encoder: features for each `t`, projected
    /// by one MLP used for both modalities.
    pub fn embed_timesteps(&self, g: &mut Graph, bound: &BoundParams, ts: &[usize]) -> Result<Var> {
        let td = self.cfg.timestep_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * td);
        for &t in ts {
            data.extend(sinusoidal_embedding(t as f64, td, 10_000.0));
        }
        let x = g.constant(data, vec![ts.len(), td])?;
        let w1 = self.p(bound, "time.mlp1.w");
        let b1 = self.p(bound, "time.mlp1.b");
        let w2 = self.p(bound, "time.mlp2.w");
        let b2 = self.p(bound, "time.mlp2.b");
        let h = self.linear(g, x, w1, b1)?;
        let h = g.silu(h);
        self.linear(g, h, w2, b2)
    }

    fn patch_perms(&self, batch: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
        if let Some(p) = self.perm_cache.borrow().get(&batch) {
            return p.clone();
        }
        let cfg = &self.cfg;
        let (h, w, c) = cfg.image_hwc;
        let (ph, pw, pt) = cfg.patch;
        let (nv, ho) = (cfg.num_views, cfg.obs_history);
        let numel = batch * cfg.obs_numel();
        let mut perm = Vec::with_capacity(numel);
        // Token order: view, temporal group, patch row, patch col.
        // Within a token: (dt, dy, dx, channel).
        for bi in 0..batch {
            for v in 0..nv {
                for tg in 0..ho / pt {
                    for py in 0..h / ph {
                        for px in 0..w / pw {
                            for dt in 0..pt {
                                for dy in 0..ph {
                                    for dx in 0..pw {
                                        for ch in 0..c {
                                            let f = tg * pt + dt;
                                            let y = py * ph + dy;
                                            let x = px * pw + dx;
                                            perm.push(
                                                ((((bi * nv + v) * ho + f) * h + y) * w + x) * c
                                                    + ch,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inv = vec![0usize; numel];
        for (i, &src) in perm.iter().enumerate() {
            inv[src] = i;
        }
        let pair = (Arc::new(perm), Arc::new(inv));
        self.perm_cache.borrow_mut().insert(batch, pair.clone());
        pair
    }

    /// `[B, n_c, h_o, H, W, C] -> [B, n_tokens, patch_volume]`.
    pub fn patchify(&self, g: &mut Graph, obs: Var) -> Result<Var> {
        let b = g.shape(obs)[0];
        let (perm, _) = self.patch_perms(b);
        g.reorder(
            obs,
            perm,
            &[b, self.cfg.num_obs_tokens(), self.cfg.patch_volume()],
        )
    }

    /// Inverse of [`UwmNet::patchify`].
    pub fn unpatchify(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let b = g.shape(tokens)[0];
        let (_, inv) = self.patch_perms(b);
        let mut shape = vec![b];
        shape.extend(self.cfg.obs_shape());
        g.reorder(tokens, inv, &shape)
    }

    fn attention(&self, g: &mut Graph, bound: &BoundParams, x: Var, block: usize) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let sh = g.shape(x).to_vec();
        let (b, s) = (sh[0], sh[1]);
        let wqkv = self.p(bound, &format!("blocks.{block}.qkv.w"));
        let bqkv = self.p(bound, &format!("blocks.{block}.qkv.b"));
        let qkv = self.linear(g, x, wqkv, bqkv)?; // [B, S, 3D]
        let q = g.narrow(qkv, 2, 0, d)?;
        let k = g.narrow(qkv, 2, d, d)?;
        let v = g.narrow(qkv, 2, 2 * d, d)?;
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, s, heads, dh])?;
            g.permute(t, &[0, 2, 1, 3]) // [B, H, S, dh]
        };
        let q = split(g, q)?;
        let k = split(g, k)?;
        let v = split(g, v)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores)?;
        let ctx = g.matmul(probs, v)?; // [B, H, S, dh]
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, d])?;
        let wo = self.p(bound, &format!("blocks.{block}.attn_out.w"));
        let bo = self.p(bound, &format!("blocks.{block}.attn_out.b"));
        self.linear(g, ctx, wo, bo)
    }

    /// Batched forward pass.
    ///
    /// `action_mask[b] = true` replaces sample `b`'s action tokens with the
    /// learned mask token (shared-timestep and regression co-training).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        obs: Var,
        noisy_action: Var,
        noisy_obs: Option<Var>,
        t_a: &[usize],
        t_o: &[usize],
        action_mask: Option<&[bool]>,
    ) -> Result<ForwardOutput> {
        let batch = g.shape(obs)[0];
        let d = self.cfg.embed_dim;
        let (h_a, d_a) = (self.cfg.action_horizon, self.cfg.action_dim);
        if g.shape(noisy_action) != [batch, h_a, d_a] {
            return Err(CoreError::ShapeMismatch {
                op: "forward: noisy_action",
                lhs: g.shape(noisy_action).to_vec(),
                rhs: vec![batch, h_a, d_a],
            });
        }
        if matches!(self.variant, NetVariant::SharedTimestep) && t_a != t_o {
            return Err(CoreError::invalid(
                "shared-timestep variant requires t_a == t_o",
            ));
        }

        // Conditioning vector.
        let obs_feat = self.encode_observation(g, bound, obs)?;
        let cond = match self.variant {
            NetVariant::Uwm | NetVariant::SharedTimestep => {
                let ea = self.embed_timesteps(g, bound, t_a)?;
                let eo = self.embed_timesteps(g, bound, t_o)?;
                g.concat(&[obs_feat, ea, eo], 1)?
            }
            NetVariant::ActionOnly => {
                let ea = self.embed_timesteps(g, bound, t_a)?;
                g.concat(&[obs_feat, ea], 1)?
            }
            NetVariant::Regression => obs_feat,
        };

        // Token sequence: [action tokens, obs patch tokens, registers].
        let action_tokens = if matches!(self.variant, NetVariant::Regression) {
            let q = self.p(bound, "query.action");
            g.broadcast_to(q, &[batch, h_a, d])?
        } else {
            let w1 = self.p(bound, "act.mlp1.w");
            let b1 = self.p(bound, "act.mlp1.b");
            let w2 = self.p(bound, "act.mlp2.w");
            let b2 = self.p(bound, "act.mlp2.b");
            let t = self.linear(g, noisy_action, w1, b1)?;
            let t = g.silu(t);
            self.linear(g, t, w2, b2)?
        };
        let action_tokens = if let Some(mask) = action_mask {
            if !self.has_mask_token() {
                return Err(CoreError::invalid(format!(
                    "variant {:?} has no mask token",
                    self.variant
                )));
            }
            if mask.len() != batch {
                return Err(CoreError::invalid("action_mask length must equal batch"));
            }
            let keep: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
            let drop: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let keep = g.constant(keep, vec![batch, 1, 1])?;
            let drop = g.constant(drop, vec![batch, 1, 1])?;
            let mtok = self.p(bound, "mask_token");
            let mtok = g.reshape(mtok, &[1, 1, d])?;
            let mtok = g.broadcast_to(mtok, &[batch, h_a, d])?;
            let kept = g.mul(action_tokens, keep)?;
            let masked = g.mul(mtok, drop)?;
            g.add(kept, masked)?
        } else {
            action_tokens
        };

        let mut parts = vec![action_tokens];
        if self.has_obs_tokens() {
            let n_obs = self.cfg.num_obs_tokens();
            let obs_tokens = if matches!(self.variant, NetVariant::Regression) {
                let q = self.p(bound, "query.obs");
                g.broadcast_to(q, &[batch, n_obs, d])?
            } else {
                let no = noisy_obs.ok_or_else(|| {
                    CoreError::invalid("forward: this variant requires noisy_obs")
                })?;
                let patches = self.patchify(g, no)?;
                let pw = self.p(bound, "patch.proj.w");
                let pb = self.p(bound, "patch.proj.b");
                self.linear(g, patches, pw, pb)?
            };
            parts.push(obs_tokens);
        }
        if self.has_registers() {
            let r = self.p(bound, "registers");
            let r = g.broadcast_to(r, &[batch, self.cfg.num_registers, d])?;
            parts.push(r);
        }
        let seq = g.concat(&parts, 1)?;
        let pos = self.p(bound, "pos");
        let mut x = g.add(seq, pos)?;

        // Transformer blocks with AdaLN modulation from the conditioning
        // vector; gates start at zero so blocks begin as identities.
        for i in 0..self.cfg.depth {
            let mw = self.p(bound, &format!("blocks.{i}.mod.w"));
            let mb = self.p(bound, &format!("blocks.{i}.mod.b"));
            let m = self.linear(g, cond, mw, mb)?; // [B, 6D]
            let chunk = |g: &mut Graph, j: usize| -> Result<Var> {
                let c = g.narrow(m, 1, j * d, d)?;
                g.reshape(c, &[batch, 1, d])
            };
            let shift1 = chunk(g, 0)?;
            let scale1 = chunk(g, 1)?;
            let gate1 = chunk(g, 2)?;
            let shift2 = chunk(g, 3)?;
            let scale2 = chunk(g, 4)?;
            let gate2 = chunk(g, 5)?;

            let hmod = {
                let n = g.layer_norm(x, 1e-5)?;
                let s1 = g.add_scalar(scale1, 1.0);
                let n = g.mul(n, s1)?;
                g.add(n, shift1)?
            };
            let attn = self.attention(g, bound, hmod, i)?;
            let gated = g.mul(attn, gate1)?;
            x = g.add(x, gated)?;

            let hmod = {
                let n = g.layer_norm(x, 1e-5)?;
                let s2 = g.add_scalar(scale2, 1.0);
                let n = g.mul(n, s2)?;
                g.add(n, shift2)?
            };
            let w1 = self.p(bound, &format!("blocks.{i}.mlp1.w"));
            let b1 = self.p(bound, &format!("blocks.{i}.mlp1.b"));
            let w2 = self.p(bound, &format!("blocks.{i}.mlp2.w"));
            let b2 = self.p(bound, &format!("blocks.{i}.mlp2.b"));
            let hh = self.linear(g, hmod, w1, b1)?;
            let hh = g.gelu(hh);
            let mlp = self.linear(g, hh, w2, b2)?;
            let gated = g.mul(mlp, gate2)?;
            x = g.add(x, gated)?;

            if g.value(x).iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite {
                    location: format!("transformer block {i}"),
                    step: 0,
                });
            }
        }

        let final_tokens = x;
        let normed = g.layer_norm(final_tokens, 1e-5)?;

        let a_slice = g.narrow(normed, 1, 0, h_a)?;
        let haw = self.p(bound, "head.action.w");
        let hab = self.p(bound, "head.action.b");
        let eps_a = self.linear(g, a_slice, haw, hab)?;

        let eps_o = if self.has_obs_tokens() {
            let n_obs = self.cfg.num_obs_tokens();
            let o_slice = g.narrow(normed, 1, h_a, n_obs)?;
            let how = self.p(bound, "head.obs.w");
            let hob = self.p(bound, "head.obs.b");
            let o_patches = self.linear(g, o_slice, how, hob)?;
            Some(self.unpatchify(g, o_patches)?)
        } else {
            None
        };

        Ok(ForwardOutput {
            eps_a,
            eps_o,
            final_tokens,
        })
    }

    /// Binds the network to one observation stack as a [`NoisePredictor`].
    pub fn predictor(&self, obs_stack: &[f64]) -> Result<BoundNet<'_>> {
        if obs_stack.len() != self.cfg.obs_numel() {
            return Err(CoreError::invalid(format!(
                "predictor: obs stack has {} elements, expected {}",
                obs_stack.len(),
                self.cfg.obs_numel()
            )));
        }
        Ok(BoundNet {
            net: self,
            obs: obs_stack.to_vec(),
        })
    }
}

/// A network bound to a fixed current observation for sampling.
pub struct BoundNet<'a> {
    net: &'a UwmNet,
    obs: Vec<f64>,
}

impl NoisePredictor for BoundNet<'_> {
    fn action_numel(&self) -> usize {
        self.net.cfg.action_numel()
    }

    fn obs_numel(&self) -> usize {
        self.net.cfg.obs_numel()
    }

    fn predict(
        &self,
        a_t: &[f64],
        o_t: &[f64],
        t_a: usize,
        t_o: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = &self.net.cfg;
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g);
        let mut obs_shape = vec![1];
        obs_shape.extend(cfg.obs_shape());
        let obs = g.constant(self.obs.clone(), obs_shape.clone())?;
        let a = g.constant(a_t.to_vec(), vec![1, cfg.action_horizon, cfg.action_dim])?;
        let (t_a_v, t_o_v) = if matches!(self.net.variant, NetVariant::SharedTimestep) {
            // Joint chains advance together; a pinned modality reuses the
            // active modality's timestep.
            let t = t_a.max(t_o);
            (vec![t], vec![t])
        } else {
            (vec![t_a], vec![t_o])
        };
        let out = if matches!(self.net.variant, NetVariant::ActionOnly) {
            self.net
                .forward(&mut g, &bound, obs, a, None, &t_a_v, &t_o_v, None)?
        } else {
            let o = g.constant(o_t.to_vec(), obs_shape)?;
            self.net
                .forward(&mut g, &bound, obs, a, Some(o), &t_a_v, &t_o_v, None)?
        };
        let eps_a = g.value(out.eps_a).to_vec();
        let eps_o = match out.eps_o {
            Some(v) => g.value(v).to_vec(),
            None => vec![0.0; cfg.obs_numel()],
        };
        Ok((eps_a, eps_o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;

    fn forward_once(
        net: &UwmNet,
        seed: u64,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let cfg = &net.cfg;
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let mut obs_shape = vec![2];
        obs_shape.extend(cfg.obs_shape());
        let obs = g
            .constant(randn_vec(2 * cfg.obs_numel(), &mut rng), obs_shape.clone())
            .unwrap();
        let a = g
            .constant(
                randn_vec(2 * cfg.action_numel(), &mut rng),
                vec![2, cfg.action_horizon, cfg.action_dim],
            )
            .unwrap();
        let o = g
            .constant(randn_vec(2 * cfg.obs_numel(), &mut rng), obs_shape)
            .unwrap();
        let out = net
            .forward(&mut g, &bound, obs, a, Some(o), &[3, 60], &[50, 17], None)
            .unwrap();
        (
            g.value(out.eps_a).to_vec(),
            g.value(out.eps_o.unwrap()).to_vec(),
        )
    }

    #[test]
    fn output_shapes_match_input_noisy_shapes() {
        let net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 1).unwrap();
        let (eps_a, eps_o) = forward_once(&net, 2);
        assert_eq!(eps_a.len(), 2 * net.cfg.action_numel());
        assert_eq!(eps_o.len(), 2 * net.cfg.obs_numel());
    }

    #[test]
    fn zero_registers_is_valid() {
        let mut cfg = UwmConfig::tiny();
        cfg.num_registers = 0;
        let net = UwmNet::new(cfg, NetVariant::Uwm, 1).unwrap();
        let (eps_a, _) = forward_once(&net, 3);
        assert!(eps_a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 7).unwrap();
        let (a1, o1) = forward_once(&net, 11);
        let (a2, o2) = forward_once(&net, 11);
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(o1.iter().zip(&o2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn changing_obs_timestep_changes_action_prediction() {
        // Coupling across modalities on random (jittered) weights.
        let mut net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 5).unwrap();
        net.jitter_params(0.05, &mut rng_from_seed(6));
        let cfg = net.cfg;
        let mut rng = rng_from_seed(8);
        let obs_data = randn_vec(cfg.obs_numel(), &mut rng);
        let a_data = randn_vec(cfg.action_numel(), &mut rng);
        let o_data = randn_vec(cfg.obs_numel(), &mut rng);
        let run = |t_o: usize| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let mut obs_shape = vec![1];
            obs_shape.extend(cfg.obs_shape());
            let obs = g.constant(obs_data.clone(), obs_shape.clone()).unwrap();
            let a = g
                .constant(a_data.clone(), vec![1, cfg.action_horizon, cfg.action_dim])
                .unwrap();
            let o = g.constant(o_data.clone(), obs_shape).unwrap();
            let out = net
                .forward(&mut g, &bound, obs, a, Some(o), &[30], &[t_o], None)
                .unwrap();
            g.value(out.eps_a).to_vec()
        };
        let at_10 = run(10);
        let at_90 = run(90);
        let diff: f64 = at_10
            .iter()
            .zip(&at_90)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-8, "action prediction must depend on t_o (diff {diff})");
    }

    #[test]
    fn encoder_distinguishes_single_pixel_change() {
        let net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 2).unwrap();
        let cfg = net.cfg;
        let encode = |obs_data: Vec<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let mut shape = vec![1];
            shape.extend(cfg.obs_shape());
            let obs = g.constant(obs_data, shape).unwrap();
            let feat = net.encode_observation(&mut g, &bound, obs).unwrap();
            g.value(feat).to_vec()
        };
        let zeros = vec![0.0; cfg.obs_numel()];
        let f0 = encode(zeros.clone());
        assert!(f0.iter().all(|v| v.is_finite()));
        let mut one_pixel = zeros;
        one_pixel[5] = 1.0;
        let f1 = encode(one_pixel);
        assert!(f0 != f1, "encoder must be sensitive to pixel changes");
        // Purity: identical input twice.
        let f0b = encode(vec![0.0; cfg.obs_numel()]);
        assert!(f0.iter().zip(&f0b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shared_timestep_encoder_gives_identical_embeddings() {
        let net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 3).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let ea = net.embed_timesteps(&mut g, &bound, &[42]).unwrap();
        let eo = net.embed_timesteps(&mut g, &bound, &[42]).unwrap();
        assert_eq!(g.value(ea), g.value(eo));
        assert_eq!(g.shape(ea), &[1, net.cfg.timestep_embed_dim]);
        // Endpoints differ.
        let e0 = net.embed_timesteps(&mut g, &bound, &[0]).unwrap();
        let et = net.embed_timesteps(&mut g, &bound, &[100]).unwrap();
        let norm_diff: f64 = g
            .value(e0)
            .iter()
            .zip(g.value(et))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(norm_diff > 1e-6);
    }

    #[test]
    fn patchify_unpatchify_roundtrip() {
        let net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 4).unwrap();
        let cfg = net.cfg;
        let mut rng = rng_from_seed(12);
        let mut g = Graph::new();
        let mut shape = vec![3];
        shape.extend(cfg.obs_shape());
        let data = randn_vec(3 * cfg.obs_numel(), &mut rng);
        let obs = g.constant(data.clone(), shape).unwrap();
        let tokens = net.patchify(&mut g, obs).unwrap();
        assert_eq!(
            g.shape(tokens),
            &[3, cfg.num_obs_tokens(), cfg.patch_volume()]
        );
        let back = net.unpatchify(&mut g, tokens).unwrap();
        assert_eq!(g.value(back), &data[..]);
    }

    #[test]
    fn parameter_count_is_pure_function_of_config() {
        let a = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 1).unwrap();
        let b = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 999).unwrap();
        assert_eq!(a.params.num_scalars(), b.params.num_scalars());
        let names_a: Vec<_> = a.params.entries.iter().map(|p| &p.name).collect();
        let names_b: Vec<_> = b.params.entries.iter().map(|p| &p.name).collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn nan_in_activations_names_the_block() {
        let mut net = UwmNet::new(UwmConfig::tiny(), NetVariant::Uwm, 1).unwrap();
        // Poison a block-1 weight so block 1 produces NaN.
        net.params
            .get_mut("blocks.1.mlp2.w")
            .unwrap()
            .value
            .data[0] = f64::NAN;
        // Jitter the gates so the poisoned path contributes.
        net.jitter_params(0.05, &mut rng_from_seed(3));
        net.params
            .get_mut("blocks.1.mlp2.w")
            .unwrap()
            .value
            .data[0] = f64::NAN;
        let mut rng = rng_from_seed(5);
        let cfg = net.cfg;
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let mut shape = vec![1];
        shape.extend(cfg.obs_shape());
        let obs = g.constant(randn_vec(cfg.obs_numel(), &mut rng), shape.clone()).unwrap();
        let a = g
            .constant(
                randn_vec(cfg.action_numel(), &mut rng),
                vec![1, cfg.action_horizon, cfg.action_dim],
            )
            .unwrap();
        let o = g.constant(randn_vec(cfg.obs_numel(), &mut rng), shape).unwrap();
        let err = net
            .forward(&mut g, &bound, obs, a, Some(o), &[10], &[20], None)
            .err()
            .expect("poisoned forward must fail");
        assert!(err.to_string().contains("block 1"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = UwmConfig::tiny();
        cfg.patch = (3, 4, 2);
        assert!(cfg.validate().is_err());
        let mut cfg = UwmConfig::tiny();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }
}
