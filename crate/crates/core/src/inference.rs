//! Reverse-process samplers and the four inference modes.
//!
//! Every mode is the same reverse chain with different timestep pins:
//! marginalize a modality by holding it at `T` as pure noise, condition on
//! it by holding it at `0` with the clean value. Only the active modality's
//! chain advances.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{randn_vec, Rng};
use crate::schedule::NoiseSchedule;

/// Predicts per-modality noise given noisy inputs and both timesteps.
/// Implementations are bound to a fixed conditioning context (the current
/// observation or an oracle context id).
pub trait NoisePredictor {
    fn action_numel(&self) -> usize;
    fn obs_numel(&self) -> usize;
    /// Returns `(eps_a_hat, eps_o_hat)`. The entry for a block pinned at
    /// `t = 0` is never consumed by the samplers.
    fn predict(&self, a_t: &[f64], o_t: &[f64], t_a: usize, t_o: usize)
        -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Wrapper that records every `(t_a, t_o)` pair passed to the inner
/// predictor. Used to assert the timestep pins of each mode.
pub struct RecordingPredictor<'a> {
    pub inner: &'a dyn NoisePredictor,
    pub calls: RefCell<Vec<(usize, usize)>>,
}

impl<'a> RecordingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        RecordingPredictor {
            inner,
            calls: RefCell::new(Vec::new()),
        }
    }
}

impl NoisePredictor for RecordingPredictor<'_> {
    fn action_numel(&self) -> usize {
        self.inner.action_numel()
    }
    fn obs_numel(&self) -> usize {
        self.inner.obs_numel()
    }
    fn predict(
        &self,
        a_t: &[f64],
        o_t: &[f64],
        t_a: usize,
        t_o: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.calls.borrow_mut().push((t_a, t_o));
        self.inner.predict(a_t, o_t, t_a, t_o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    Policy,
    VideoPrediction,
    ForwardDynamics,
    InverseDynamics,
    /// Both chains advanced with a shared step index.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Strided deterministic-by-default sampler; `eta` adds stochasticity.
    Ddim,
    /// Full-length ancestral chain with posterior noise.
    Ddpm,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: InferenceMode,
    pub kind: SamplerKind,
    /// Number of reverse steps for DDIM; DDPM always runs the full chain.
    pub num_steps: usize,
    /// Stochasticity in [0, 1]; 0 makes DDIM deterministic given the seed.
    pub eta: f64,
    /// Clamp the implied clean sample to [-1, 1] before each update.
    pub clip_sample: bool,
    pub seed: u64,
    /// Actions executed per replanning cycle during rollouts (h'_a).
    pub exec_horizon: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: InferenceMode::Policy,
            kind: SamplerKind::Ddim,
            num_steps: 10,
            eta: 0.0,
            clip_sample: true,
            seed: 0,
            exec_horizon: 2,
        }
    }
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// One ancestral DDPM step `x_t -> x_{t-1}`.
///
/// Without clipping this is literally
/// `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * noise`;
/// with clipping the implied `x0` is clamped to [-1, 1] and the equivalent
/// posterior-mean form is used. `noise` is ignored at `t = 1` where
/// `sigma_1 = 0`.
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    noise: &[f64],
    clip_sample: bool,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(CoreError::invalid("ddpm_step: t = 0 has nothing to denoise"));
    }
    sched.check_t(t, "ddpm_step")?;
    let abar = sched.alpha_bars[t];
    let abar_prev = sched.alpha_bars[t - 1];
    let alpha = sched.alphas[t];
    let beta = sched.betas[t];
    let sigma = sched.sigmas[t];
    let mut out = vec![0.0; x_t.len()];
    if clip_sample {
        let c0 = abar_prev.sqrt() * beta / (1.0 - abar);
        let ct = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        for i in 0..x_t.len() {
            let x0 = clamp_unit((x_t[i] - (1.0 - abar).sqrt() * eps_hat[i]) / abar.sqrt());
            out[i] = c0 * x0 + ct * x_t[i] + sigma * noise[i];
        }
    } else {
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let coef = beta / (1.0 - abar).sqrt();
        for i in 0..x_t.len() {
            out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]) + sigma * noise[i];
        }
    }
    Ok(out)
}

/// One DDIM step `x_t -> x_{t_prev}` with stochasticity `eta`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &[f64],
    clip_sample: bool,
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(CoreError::invalid(format!(
            "ddim_step: subsequence must be strictly decreasing, got {t} -> {t_prev}"
        )));
    }
    sched.check_t(t, "ddim_step")?;
    let abar = sched.alpha_bars[t];
    let abar_prev = sched.alpha_bars[t_prev];
    let sigma = eta * ddim_sigma(sched, t, t_prev);
    let dir_coef = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = vec![0.0; x_t.len()];
    for i in 0..x_t.len() {
        let mut x0 = (x_t[i] - (1.0 - abar).sqrt() * eps_hat[i]) / abar.sqrt();
        if clip_sample {
            x0 = clamp_unit(x0);
        }
        out[i] = abar_prev.sqrt() * x0 + dir_coef * eps_hat[i] + sigma * noise[i];
    }
    Ok(out)
}

/// DDIM noise scale for the transition `t -> t_prev`; at `eta = 1` and
/// consecutive steps this equals the DDPM posterior sigma.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
    let abar = sched.alpha_bars[t];
    let abar_prev = sched.alpha_bars[t_prev];
    (((1.0 - abar_prev) / (1.0 - abar)) * (1.0 - abar / abar_prev)).sqrt()
}

/// Uniform-stride reverse subsequence: starts at `T`, ends with a step to 0.
pub fn ddim_timesteps(num_train_steps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > num_train_steps {
        return Err(CoreError::invalid(format!(
            "ddim_timesteps: need 1 <= num_steps <= T, got {num_steps} of {num_train_steps}"
        )));
    }
    Ok((0..num_steps)
        .map(|i| ((num_steps - i) * num_train_steps) / num_steps)
        .collect())
}

/// `(t, t_prev)` pairs for the configured sampler.
pub fn reverse_pairs(sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<(usize, usize)>> {
    match cfg.kind {
        SamplerKind::Ddpm => Ok((1..=sched.num_steps).rev().map(|t| (t, t - 1)).collect()),
        SamplerKind::Ddim => {
            let ts = ddim_timesteps(sched.num_steps, cfg.num_steps)?;
            let mut pairs = Vec::with_capacity(ts.len());
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
                pairs.push((t, t_prev));
            }
            Ok(pairs)
        }
    }
}

fn advance(
    x: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    match cfg.kind {
        SamplerKind::Ddpm => {
            let noise = if sched.sigmas[t] > 0.0 {
                randn_vec(x.len(), rng)
            } else {
                vec![0.0; x.len()]
            };
            ddpm_step(x, eps_hat, t, sched, &noise, cfg.clip_sample)
        }
        SamplerKind::Ddim => {
            let sig = cfg.eta * ddim_sigma(sched, t, t_prev);
            let noise = if sig > 0.0 {
                randn_vec(x.len(), rng)
            } else {
                vec![0.0; x.len()]
            };
            ddim_step(x, eps_hat, t, t_prev, sched, cfg.eta, &noise, cfg.clip_sample)
        }
    }
}

/// Which modality a chain is denoising.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Active {
    Action,
    Obs,
}

/// Runs a reverse chain on one modality while the other stays pinned at a
/// fixed `(timestep, value)`.
fn run_single_chain(
    p: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    active: Active,
    pinned_t: usize,
    pinned: &[f64],
) -> Result<Vec<f64>> {
    let n = match active {
        Active::Action => p.action_numel(),
        Active::Obs => p.obs_numel(),
    };
    let mut x = randn_vec(n, rng);
    for (t, t_prev) in reverse_pairs(sched, cfg)? {
        let eps_hat = match active {
            Active::Action => p.predict(&x, pinned, t, pinned_t)?.0,
            Active::Obs => p.predict(pinned, &x, pinned_t, t)?.1,
        };
        x = advance(&x, &eps_hat, t, t_prev, sched, cfg, rng)?;
    }
    Ok(x)
}

/// Policy mode `p(a | o)`: next observation marginalized by pinning
/// `t_o' = T` with a single fixed draw `o'_T ~ N(0, I)`.
pub fn sample_policy(
    p: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let o_noise = randn_vec(p.obs_numel(), rng);
    run_single_chain(p, sched, cfg, rng, Active::Action, sched.num_steps, &o_noise)
}

/// Video prediction mode `p(o' | o)`: action marginalized by pinning
/// `t_a = T` with a single fixed draw `a_T ~ N(0, I)`.
pub fn sample_video(
    p: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let a_noise = randn_vec(p.action_numel(), rng);
    run_single_chain(p, sched, cfg, rng, Active::Obs, sched.num_steps, &a_noise)
}

/// Forward dynamics mode `p(o' | o, a)`: condition on the clean action by
/// pinning `t_a = 0`.
pub fn sample_forward(
    p: &dyn NoisePredictor,
    action: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if action.len() != p.action_numel() {
        return Err(CoreError::invalid(format!(
            "sample_forward: action has {} elements, expected {}",
            action.len(),
            p.action_numel()
        )));
    }
    run_single_chain(p, sched, cfg, rng, Active::Obs, 0, action)
}

/// Inverse dynamics mode `p(a | o, o')`: condition on the clean next
/// observation by pinning `t_o' = 0`.
pub fn sample_inverse(
    p: &dyn NoisePredictor,
    obs_target: &[f64],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if obs_target.len() != p.obs_numel() {
        return Err(CoreError::invalid(format!(
            "sample_inverse: target has {} elements, expected {}",
            obs_target.len(),
            p.obs_numel()
        )));
    }
    run_single_chain(p, sched, cfg, rng, Active::Action, 0, obs_target)
}

/// Joint mode `p(a, o' | o)`: both chains advanced with a shared step index.
pub fn sample_joint(
    p: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = randn_vec(p.action_numel(), rng);
    let mut o = randn_vec(p.obs_numel(), rng);
    for (t, t_prev) in reverse_pairs(sched, cfg)? {
        let (eps_a, eps_o) = p.predict(&a, &o, t, t)?;
        a = advance(&a, &eps_a, t, t_prev, sched, cfg, rng)?;
        o = advance(&o, &eps_o, t, t_prev, sched, cfg, rng)?;
    }
    Ok((a, o))
}

/// Environment surface needed by closed-loop rollouts.
pub trait Environment {
    /// Flattened current observation stack `[n_c, h_o, H, W, C]`.
    fn obs_stack(&self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<()>;
    fn succeeded(&self) -> bool;
}

/// Samples a full action chunk `[h_a, d_a]` given an observation stack.
pub trait ChunkPolicy {
    fn action_dims(&self) -> (usize, usize);
    fn action_chunk(&self, obs_stack: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeRecord {
    /// Observation stack at each replanning point.
    pub observations: Vec<Vec<f64>>,
    /// Executed actions, one `[d_a]` row per environment step.
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
    pub steps: usize,
}

/// Closed loop: observe, sample a chunk, execute the first `exec_horizon`
/// actions, repeat until success or `horizon` env steps.
pub fn rollout(
    env: &mut dyn Environment,
    policy: &dyn ChunkPolicy,
    cfg: &SamplerConfig,
    horizon: usize,
    rng: &mut Rng,
) -> Result<EpisodeRecord> {
    let (h_a, d_a) = policy.action_dims();
    let exec = cfg.exec_horizon.clamp(1, h_a);
    let mut rec = EpisodeRecord::default();
    while rec.steps < horizon && !env.succeeded() {
        let obs = env.obs_stack();
        let chunk = policy.action_chunk(&obs, rng).map_err(|e| {
            CoreError::invalid(format!("rollout: policy failed at step {}: {e}", rec.steps))
        })?;
        rec.observations.push(obs);
        for k in 0..exec {
            if rec.steps >= horizon || env.succeeded() {
                break;
            }
            let action = &chunk[k * d_a..(k + 1) * d_a];
            env.step(action).map_err(|e| {
                CoreError::invalid(format!("rollout: env failed at step {}: {e}", rec.steps))
            })?;
            rec.actions.push(action.to_vec());
            rec.steps += 1;
        }
    }
    rec.success = env.succeeded();
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use crate::numerics::Tensor;
    use crate::schedule::{add_noise, build_schedule, ScheduleKind};

    fn sched() -> NoiseSchedule {
        build_schedule(ScheduleKind::SquaredCosCapV2, 100).unwrap()
    }

    #[test]
    fn ddpm_final_step_recovers_x0_with_true_noise() {
        let s = sched();
        let mut rng = rng_from_seed(0);
        let x0 = Tensor::randn(&[6], &mut rng);
        let eps = Tensor::randn(&[6], &mut rng);
        let x1 = add_noise(&x0, &eps, 1, &s).unwrap();
        let out = ddpm_step(&x1.data, &eps.data, 1, &s, &vec![0.0; 6], false).unwrap();
        for (a, b) in out.iter().zip(&x0.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ddpm_zero_eps_zero_sigma_is_closed_form_rescaling() {
        let s = sched();
        let x_t: Vec<f64> = vec![0.3, -0.7, 0.1];
        // Run t = 5..1 with eps_hat = 0 and no injected noise; the closed
        // form is x / sqrt(prod of alphas over the steps taken).
        let mut x = x_t.clone();
        for t in (1..=5).rev() {
            x = ddpm_step(&x, &vec![0.0; 3], t, &s, &vec![0.0; 3], false).unwrap();
        }
        let mut prod = 1.0;
        for t in 1..=5 {
            prod *= s.alphas[t];
        }
        for (a, b) in x.iter().zip(&x_t) {
            assert!((a - b / prod.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_clip_bounds_implied_x0() {
        let s = sched();
        // Large x_t with zero predicted noise implies |x0| >> 1.
        let x_t = vec![50.0];
        let t = 50;
        let clipped = ddpm_step(&x_t, &[0.0], t, &s, &[0.0], true).unwrap();
        let abar = s.alpha_bars[t];
        let abar_prev = s.alpha_bars[t - 1];
        let c0 = abar_prev.sqrt() * s.betas[t] / (1.0 - abar);
        let ct = s.alphas[t].sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        // x0 estimate saturates at 1.
        assert!((clipped[0] - (c0 * 1.0 + ct * 50.0)).abs() < 1e-12);
    }

    #[test]
    fn ddpm_t0_is_an_error() {
        let s = sched();
        assert!(ddpm_step(&[0.0], &[0.0], 0, &s, &[0.0], false).is_err());
    }

    #[test]
    fn ddim_single_step_recovers_x0_with_true_noise() {
        let s = sched();
        let mut rng = rng_from_seed(0);
        let x0 = Tensor::randn(&[4], &mut rng);
        let eps = Tensor::randn(&[4], &mut rng);
        let x_t = add_noise(&x0, &eps, 100, &s).unwrap();
        let out = ddim_step(&x_t.data, &eps.data, 100, 0, &s, 0.0, &vec![0.0; 4], false).unwrap();
        for (a, b) in out.iter().zip(&x0.data) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_pairs() {
        let s = sched();
        assert!(ddim_step(&[0.0], &[0.0], 5, 5, &s, 0.0, &[0.0], false).is_err());
        assert!(ddim_step(&[0.0], &[0.0], 5, 9, &s, 0.0, &[0.0], false).is_err());
    }

    #[test]
    fn ddim_timestep_grid_covers_endpoints() {
        let ts = ddim_timesteps(100, 10).unwrap();
        assert_eq!(ts, vec![100, 90, 80, 70, 60, 50, 40, 30, 20, 10]);
        let ts = ddim_timesteps(100, 100).unwrap();
        assert_eq!(ts[0], 100);
        assert_eq!(*ts.last().unwrap(), 1);
        let ts = ddim_timesteps(100, 7).unwrap();
        assert_eq!(ts[0], 100);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
    }

    /// Perfect-denoiser stand-in for a pure Gaussian N(mu, v I) target on
    /// the action block.
    struct GaussianDenoiser {
        mu: f64,
        v: f64,
        dim: usize,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for GaussianDenoiser {
        fn action_numel(&self) -> usize {
            self.dim
        }
        fn obs_numel(&self) -> usize {
            self.dim
        }
        fn predict(
            &self,
            a_t: &[f64],
            _o_t: &[f64],
            t_a: usize,
            _t_o: usize,
        ) -> Result<(Vec<f64>, Vec<f64>)> {
            // E[eps | x_t] for x0 ~ N(mu, v): linear-Gaussian posterior.
            let abar = self.sched.alpha_bars[t_a];
            let s2 = abar * self.v + (1.0 - abar);
            let eps: Vec<f64> = a_t
                .iter()
                .map(|&x| (1.0 - abar).sqrt() / s2 * (x - abar.sqrt() * self.mu))
                .collect();
            Ok((eps, vec![0.0; self.dim]))
        }
    }

    #[test]
    fn ddim_eta_zero_is_bitwise_deterministic() {
        let s = sched();
        let p = GaussianDenoiser {
            mu: 0.3,
            v: 0.2,
            dim: 5,
            sched: s.clone(),
        };
        let cfg = SamplerConfig {
            clip_sample: false,
            ..Default::default()
        };
        let a = sample_policy(&p, &s, &cfg, &mut rng_from_seed(99)).unwrap();
        let b = sample_policy(&p, &s, &cfg, &mut rng_from_seed(99)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = sample_policy(&p, &s, &cfg, &mut rng_from_seed(100)).unwrap();
        assert!(a != c, "different seeds must differ");
    }

    #[test]
    fn ddim_full_chain_eta1_matches_ddpm_statistically() {
        // Both samplers target N(mu, v) through the same perfect denoiser;
        // compare the two sample clouds with the energy distance against a
        // threshold calibrated from same-sampler resampling.
        let s = sched();
        let p = GaussianDenoiser {
            mu: -0.4,
            v: 0.3,
            dim: 2,
            sched: s.clone(),
        };
        let n = 600;
        let draw = |kind: SamplerKind, num_steps: usize, eta: f64, seed: u64| -> Vec<Vec<f64>> {
            let cfg = SamplerConfig {
                kind,
                num_steps,
                eta,
                clip_sample: false,
                ..Default::default()
            };
            let mut rng = rng_from_seed(seed);
            (0..n)
                .map(|_| sample_policy(&p, &s, &cfg, &mut rng).unwrap())
                .collect()
        };
        let ddim = draw(SamplerKind::Ddim, 100, 1.0, 1);
        let ddpm_a = draw(SamplerKind::Ddpm, 100, 0.0, 2);
        let d_cross = crate::oracle::energy_distance(&ddim, &ddpm_a);
        // Null scale: pairs of independent DDPM clouds.
        let mut nulls = Vec::new();
        for seed in 10..30u64 {
            let x = draw(SamplerKind::Ddpm, 100, 0.0, seed * 2);
            let y = draw(SamplerKind::Ddpm, 100, 0.0, seed * 2 + 1);
            nulls.push(crate::oracle::energy_distance(&x, &y));
        }
        nulls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q95 = nulls[(nulls.len() * 95) / 100 - 1];
        assert!(
            d_cross < q95,
            "ddim/ddpm energy distance {d_cross} vs null 95th percentile {q95}"
        );
    }

    #[test]
    fn mode_timestep_pins_are_as_displayed() {
        let s = sched();
        let p = GaussianDenoiser {
            mu: 0.0,
            v: 1.0,
            dim: 3,
            sched: s.clone(),
        };
        let cfg = SamplerConfig {
            clip_sample: false,
            ..Default::default()
        };
        let t_max = s.num_steps;

        let rec = RecordingPredictor::new(&p);
        sample_policy(&rec, &s, &cfg, &mut rng_from_seed(1)).unwrap();
        assert!(rec.calls.borrow().iter().all(|&(_, t_o)| t_o == t_max));

        let rec = RecordingPredictor::new(&p);
        sample_video(&rec, &s, &cfg, &mut rng_from_seed(1)).unwrap();
        assert!(rec.calls.borrow().iter().all(|&(t_a, _)| t_a == t_max));

        let rec = RecordingPredictor::new(&p);
        sample_forward(&rec, &vec![0.0; 3], &s, &cfg, &mut rng_from_seed(1)).unwrap();
        assert!(rec.calls.borrow().iter().all(|&(t_a, _)| t_a == 0));

        let rec = RecordingPredictor::new(&p);
        sample_inverse(&rec, &vec![0.0; 3], &s, &cfg, &mut rng_from_seed(1)).unwrap();
        assert!(rec.calls.borrow().iter().all(|&(_, t_o)| t_o == 0));

        let rec = RecordingPredictor::new(&p);
        sample_joint(&rec, &s, &cfg, &mut rng_from_seed(1)).unwrap();
        assert!(rec.calls.borrow().iter().all(|&(t_a, t_o)| t_a == t_o));
    }

    #[test]
    fn chains_are_independent_of_batch_order() {
        let s = sched();
        let p = GaussianDenoiser {
            mu: 0.2,
            v: 0.5,
            dim: 4,
            sched: s.clone(),
        };
        let cfg = SamplerConfig {
            clip_sample: false,
            ..Default::default()
        };
        // Per-sample seeds: sampling in any order yields the same set.
        let sample_with =
            |seed: u64| sample_policy(&p, &s, &cfg, &mut rng_from_seed(seed)).unwrap();
        let forward: Vec<_> = (0..5).map(sample_with).collect();
        let mut reverse: Vec<_> = (0..5).rev().map(sample_with).collect();
        reverse.reverse();
        assert_eq!(forward, reverse);
    }
}
