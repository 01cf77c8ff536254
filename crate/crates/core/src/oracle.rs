//! Analytically tractable joint distributions over `(a, o')` blocks given a
//! discrete context, with closed-form denoisers, marginals, and
//! conditionals. These are the exact ground truth the samplers and the
//! trained network are checked against.
//!
//! Components are isotropic Gaussians with a shared variance, which keeps
//! every posterior in closed form while preserving multimodality.

use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::inference::{
    sample_forward, sample_inverse, sample_joint, sample_policy, sample_video, NoisePredictor,
    SamplerConfig,
};
use crate::numerics::Rng;
use crate::schedule::NoiseSchedule;

/// Which block of the concatenated `(a, o')` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Action,
    Obs,
}

/// Mixture over one context: weights and full `(a, o')` means.
#[derive(Debug, Clone)]
pub struct GmmContext {
    pub weights: Vec<f64>,
    /// One mean per component, each of length `action_dim + obs_dim`.
    pub means: Vec<Vec<f64>>,
}

/// Joint mixture family over `(a, o')` indexed by a discrete context.
#[derive(Debug, Clone)]
pub struct GmmJoint {
    pub action_dim: usize,
    pub obs_dim: usize,
    /// Shared isotropic component variance.
    pub variance: f64,
    pub contexts: Vec<GmmContext>,
}

/// A mixture over a single block, produced by marginalization or
/// conditioning.
#[derive(Debug, Clone)]
pub struct GmmBlock {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variance: f64,
}

impl GmmJoint {
    pub fn validate(&self) -> Result<()> {
        if self.variance <= 0.0 {
            return Err(CoreError::invalid("gmm: variance must be positive"));
        }
        for (c, ctx) in self.contexts.iter().enumerate() {
            let sum: f64 = ctx.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || ctx.weights.iter().any(|&w| w < 0.0) {
                return Err(CoreError::invalid(format!(
                    "gmm context {c}: weights must be a distribution, got {:?}",
                    ctx.weights
                )));
            }
            if ctx.weights.len() != ctx.means.len() {
                return Err(CoreError::invalid(format!(
                    "gmm context {c}: {} weights vs {} means",
                    ctx.weights.len(),
                    ctx.means.len()
                )));
            }
            for m in &ctx.means {
                if m.len() != self.action_dim + self.obs_dim {
                    return Err(CoreError::invalid(format!(
                        "gmm context {c}: mean length {} != {}",
                        m.len(),
                        self.action_dim + self.obs_dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn ctx(&self, context: usize) -> Result<&GmmContext> {
        self.contexts.get(context).ok_or_else(|| {
            CoreError::invalid(format!(
                "gmm: context {context} out of range (have {})",
                self.contexts.len()
            ))
        })
    }

    fn block_range(&self, which: Block) -> std::ops::Range<usize> {
        match which {
            Block::Action => 0..self.action_dim,
            Block::Obs => self.action_dim..self.action_dim + self.obs_dim,
        }
    }

    /// Draws one `(a, o')` sample.
    pub fn sample(&self, context: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let ctx = self.ctx(context)?;
        let k = pick_component(&ctx.weights, rng);
        let sd = self.variance.sqrt();
        let full: Vec<f64> = ctx.means[k]
            .iter()
            .map(|&m| m + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Ok((
            full[..self.action_dim].to_vec(),
            full[self.action_dim..].to_vec(),
        ))
    }

    /// Marginal mixture over one block: weights unchanged, means projected.
    pub fn analytic_marginal(&self, context: usize, which: Block) -> Result<GmmBlock> {
        let ctx = self.ctx(context)?;
        let r = self.block_range(which);
        Ok(GmmBlock {
            weights: ctx.weights.clone(),
            means: ctx.means.iter().map(|m| m[r.clone()].to_vec()).collect(),
            variance: self.variance,
        })
    }

    /// Conditional mixture over the other block given one block's clean
    /// value. With isotropic components the means stay put; only the
    /// weights get reweighted by the likelihood of the given block.
    pub fn analytic_conditional(
        &self,
        context: usize,
        given: Block,
        value: &[f64],
    ) -> Result<GmmBlock> {
        let ctx = self.ctx(context)?;
        let gr = self.block_range(given);
        if value.len() != gr.len() {
            return Err(CoreError::invalid(format!(
                "analytic_conditional: value length {} != block size {}",
                value.len(),
                gr.len()
            )));
        }
        let other = match given {
            Block::Action => Block::Obs,
            Block::Obs => Block::Action,
        };
        let or = self.block_range(other);
        let mut logw: Vec<f64> = ctx
            .weights
            .iter()
            .zip(&ctx.means)
            .map(|(&w, m)| {
                let sq: f64 = value
                    .iter()
                    .zip(&m[gr.clone()])
                    .map(|(x, mu)| (x - mu) * (x - mu))
                    .sum();
                w.max(f64::MIN_POSITIVE).ln() - sq / (2.0 * self.variance)
            })
            .collect();
        normalize_log_weights(&mut logw);
        Ok(GmmBlock {
            weights: logw,
            means: ctx.means.iter().map(|m| m[or.clone()].to_vec()).collect(),
            variance: self.variance,
        })
    }

    /// Component responsibilities for a jointly-noised point. Each block is
    /// noised at its own `alpha_bar`, so the per-component likelihood is
    /// `N(x_b; sqrt(abar_b) mu_b, (abar_b v + 1 - abar_b) I)` per block.
    pub fn responsibilities(
        &self,
        context: usize,
        a_t: &[f64],
        o_t: &[f64],
        t_a: usize,
        t_o: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        let ctx = self.ctx(context)?;
        let ab_a = sched.alpha_bars[t_a];
        let ab_o = sched.alpha_bars[t_o];
        let s2_a = ab_a * self.variance + (1.0 - ab_a);
        let s2_o = ab_o * self.variance + (1.0 - ab_o);
        let mut logw: Vec<f64> = ctx
            .weights
            .iter()
            .zip(&ctx.means)
            .map(|(&w, m)| {
                let mut lp = w.max(f64::MIN_POSITIVE).ln();
                if self.action_dim > 0 {
                    let mut sq = 0.0;
                    for (x, mu) in a_t.iter().zip(&m[..self.action_dim]) {
                        let d = x - ab_a.sqrt() * mu;
                        sq += d * d;
                    }
                    lp -= sq / (2.0 * s2_a);
                }
                if self.obs_dim > 0 {
                    let mut sq = 0.0;
                    for (x, mu) in o_t.iter().zip(&m[self.action_dim..]) {
                        let d = x - ab_o.sqrt() * mu;
                        sq += d * d;
                    }
                    lp -= sq / (2.0 * s2_o);
                }
                lp
            })
            .collect();
        normalize_log_weights(&mut logw);
        Ok(logw)
    }

    /// Posterior mean of the clean block `E[x0_b | a_t, o_t]`.
    #[allow(clippy::too_many_arguments)]
    pub fn posterior_x0(
        &self,
        context: usize,
        a_t: &[f64],
        o_t: &[f64],
        t_a: usize,
        t_o: usize,
        sched: &NoiseSchedule,
        which: Block,
    ) -> Result<Vec<f64>> {
        let resp = self.responsibilities(context, a_t, o_t, t_a, t_o, sched)?;
        let ctx = self.ctx(context)?;
        let (x, t) = match which {
            Block::Action => (a_t, t_a),
            Block::Obs => (o_t, t_o),
        };
        let r = self.block_range(which);
        let ab = sched.alpha_bars[t];
        let s2 = ab * self.variance + (1.0 - ab);
        let gain = ab.sqrt() * self.variance / s2;
        let mut out = vec![0.0; r.len()];
        for (k, rk) in resp.iter().enumerate() {
            let mu = &ctx.means[k][r.clone()];
            for i in 0..out.len() {
                // Per-component posterior mean, responsibility-weighted.
                out[i] += rk * (mu[i] + gain * (x[i] - ab.sqrt() * mu[i]));
            }
        }
        Ok(out)
    }

    /// Conditional noise expectation `E[eps_b | a_t, o_t]` for a block with
    /// `t > 0`. A clean block has no recoverable noise, so `t = 0` is an
    /// error and callers must skip that block.
    #[allow(clippy::too_many_arguments)]
    pub fn analytic_denoiser(
        &self,
        context: usize,
        a_t: &[f64],
        o_t: &[f64],
        t_a: usize,
        t_o: usize,
        sched: &NoiseSchedule,
        which: Block,
    ) -> Result<Vec<f64>> {
        let t = match which {
            Block::Action => t_a,
            Block::Obs => t_o,
        };
        if t == 0 {
            return Err(CoreError::invalid(
                "analytic_denoiser: noise expectation of a clean (t = 0) block is undefined",
            ));
        }
        let x0 = self.posterior_x0(context, a_t, o_t, t_a, t_o, sched, which)?;
        let x = match which {
            Block::Action => a_t,
            Block::Obs => o_t,
        };
        let ab = sched.alpha_bars[t];
        let denom = (1.0 - ab).sqrt();
        Ok(x
            .iter()
            .zip(&x0)
            .map(|(xt, m)| (xt - ab.sqrt() * m) / denom)
            .collect())
    }

    /// Binds the joint to a context as a [`NoisePredictor`].
    pub fn denoiser<'a>(&'a self, context: usize, sched: &'a NoiseSchedule) -> OracleDenoiser<'a> {
        OracleDenoiser {
            joint: self,
            context,
            sched,
        }
    }
}

impl GmmBlock {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    /// Mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let k = pick_component(&self.weights, rng);
        let sd = self.variance.sqrt();
        self.means[k]
            .iter()
            .map(|&m| m + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }

    /// Index of the nearest component mean.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, m) in self.means.iter().enumerate() {
            let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Empirical component frequencies of a sample set.
    pub fn frequencies(&self, samples: &[Vec<f64>]) -> Vec<f64> {
        let mut counts = vec![0usize; self.means.len()];
        for s in samples {
            counts[self.assign(s)] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / samples.len().max(1) as f64)
            .collect()
    }
}

fn pick_component(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

fn normalize_log_weights(logw: &mut [f64]) {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - m).exp();
        z += *w;
    }
    for w in logw.iter_mut() {
        *w /= z;
    }
}

/// [`NoisePredictor`] backed by the closed-form denoiser. Blocks pinned at
/// `t = 0` return zeros, which the samplers never consume.
pub struct OracleDenoiser<'a> {
    pub joint: &'a GmmJoint,
    pub context: usize,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for OracleDenoiser<'_> {
    fn action_numel(&self) -> usize {
        self.joint.action_dim
    }
    fn obs_numel(&self) -> usize {
        self.joint.obs_dim
    }
    fn predict(
        &self,
        a_t: &[f64],
        o_t: &[f64],
        t_a: usize,
        t_o: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let eps_a = if t_a == 0 {
            vec![0.0; self.joint.action_dim]
        } else {
            self.joint
                .analytic_denoiser(self.context, a_t, o_t, t_a, t_o, self.sched, Block::Action)?
        };
        let eps_o = if t_o == 0 {
            vec![0.0; self.joint.obs_dim]
        } else {
            self.joint
                .analytic_denoiser(self.context, a_t, o_t, t_a, t_o, self.sched, Block::Obs)?
        };
        Ok((eps_a, eps_o))
    }
}

/// Two-sample energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|`.
pub fn energy_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    fn mean_cross(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        for x in a {
            for y in b {
                let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                s += d.sqrt();
            }
        }
        s / (a.len() * b.len()) as f64
    }
    fn mean_within(a: &[Vec<f64>]) -> f64 {
        let n = a.len();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = a[i]
                    .iter()
                    .zip(&a[j])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                s += d.sqrt();
            }
        }
        2.0 * s / (n * n) as f64
    }
    2.0 * mean_cross(xs, ys) - mean_within(xs) - mean_within(ys)
}

/// 95th percentile of the null energy distance between two fresh draws of
/// the reference distribution, over `reps` resamples.
pub fn calibrate_energy_threshold(
    reference: &GmmBlock,
    n_per_set: usize,
    reps: usize,
    rng: &mut Rng,
) -> f64 {
    let mut nulls: Vec<f64> = (0..reps)
        .map(|_| {
            let a: Vec<Vec<f64>> = (0..n_per_set).map(|_| reference.sample(rng)).collect();
            let b: Vec<Vec<f64>> = (0..n_per_set).map(|_| reference.sample(rng)).collect();
            energy_distance(&a, &b)
        })
        .collect();
    nulls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nulls[((nulls.len() * 95) / 100).min(nulls.len() - 1)]
}

/// One mode's comparison against its analytic target.
#[derive(Debug, Clone)]
pub struct ModeCheck {
    pub mode: &'static str,
    pub context: usize,
    pub energy: f64,
    pub threshold: f64,
    pub max_mean_err: f64,
    pub max_freq_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub checks: Vec<ModeCheck>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// CSV columns: mode,context,energy,threshold,mean_err,freq_err,pass
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,context,energy,threshold,mean_err,freq_err,pass\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.mode, c.context, c.energy, c.threshold, c.max_mean_err, c.max_freq_err, c.pass
            ));
        }
        out
    }
}

pub struct OracleCheckSettings {
    pub samples_per_check: usize,
    pub calibration_reps: usize,
    pub mean_tol: f64,
    pub freq_tol: f64,
}

impl Default for OracleCheckSettings {
    fn default() -> Self {
        OracleCheckSettings {
            samples_per_check: 1500,
            calibration_reps: 60,
            mean_tol: 0.05,
            freq_tol: 0.05,
        }
    }
}

/// Compares a sample cloud against an analytic mixture: energy distance
/// below a resampling-calibrated threshold, mixture mean within tolerance,
/// component frequencies within tolerance.
pub fn compare_to_reference(
    mode: &'static str,
    context: usize,
    samples: &[Vec<f64>],
    reference: &GmmBlock,
    settings: &OracleCheckSettings,
    rng: &mut Rng,
) -> ModeCheck {
    let reference_draws: Vec<Vec<f64>> =
        (0..samples.len()).map(|_| reference.sample(rng)).collect();
    let energy = energy_distance(samples, &reference_draws);
    let threshold =
        calibrate_energy_threshold(reference, samples.len(), settings.calibration_reps, rng);
    let mean = reference.mean();
    let emp_mean: Vec<f64> = (0..mean.len())
        .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / samples.len() as f64)
        .collect();
    let max_mean_err = mean
        .iter()
        .zip(&emp_mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let freqs = reference.frequencies(samples);
    let max_freq_err = reference
        .weights
        .iter()
        .zip(&freqs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pass = energy < threshold
        && max_mean_err < settings.mean_tol
        && max_freq_err < settings.freq_tol;
    ModeCheck {
        mode,
        context,
        energy,
        threshold,
        max_mean_err,
        max_freq_err,
        pass,
    }
}

/// Runs all sampling modes with the analytic denoiser plugged into the
/// inference module and compares against the analytic targets.
///
/// Conditioning values for the forward/inverse checks are component means
/// of the conditioned block, which makes the analytic conditionals sharp.
pub fn oracle_sampler_check(
    joint: &GmmJoint,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    settings: &OracleCheckSettings,
    rng: &mut Rng,
) -> Result<OracleReport> {
    joint.validate()?;
    let mut report = OracleReport::default();
    let n = settings.samples_per_check;
    for context in 0..joint.contexts.len() {
        let denoiser = joint.denoiser(context, sched);

        let target = joint.analytic_marginal(context, Block::Action)?;
        let samples: Result<Vec<_>> = (0..n)
            .map(|_| sample_policy(&denoiser, sched, cfg, rng))
            .collect();
        report.checks.push(compare_to_reference(
            "policy", context, &samples?, &target, settings, rng,
        ));

        let target = joint.analytic_marginal(context, Block::Obs)?;
        let samples: Result<Vec<_>> = (0..n)
            .map(|_| sample_video(&denoiser, sched, cfg, rng))
            .collect();
        report.checks.push(compare_to_reference(
            "video", context, &samples?, &target, settings, rng,
        ));

        // Forward dynamics: condition on component 0's action mean.
        let cond_a = joint.contexts[context].means[0][..joint.action_dim].to_vec();
        let target = joint.analytic_conditional(context, Block::Action, &cond_a)?;
        let samples: Result<Vec<_>> = (0..n)
            .map(|_| sample_forward(&denoiser, &cond_a, sched, cfg, rng))
            .collect();
        report.checks.push(compare_to_reference(
            "forward", context, &samples?, &target, settings, rng,
        ));

        // Inverse dynamics: condition on the last component's obs mean.
        let k_last = joint.contexts[context].means.len() - 1;
        let cond_o = joint.contexts[context].means[k_last][joint.action_dim..].to_vec();
        let target = joint.analytic_conditional(context, Block::Obs, &cond_o)?;
        let samples: Result<Vec<_>> = (0..n)
            .map(|_| sample_inverse(&denoiser, &cond_o, sched, cfg, rng))
            .collect();
        report.checks.push(compare_to_reference(
            "inverse", context, &samples?, &target, settings, rng,
        ));

        // Joint mode vs the full joint (concatenated blocks).
        let full_target = GmmBlock {
            weights: joint.contexts[context].weights.clone(),
            means: joint.contexts[context].means.clone(),
            variance: joint.variance,
        };
        let samples: Result<Vec<_>> = (0..n)
            .map(|_| {
                sample_joint(&denoiser, sched, cfg, rng).map(|(a, o)| {
                    let mut full = a;
                    full.extend(o);
                    full
                })
            })
            .collect();
        report.checks.push(compare_to_reference(
            "joint", context, &samples?, &full_target, settings, rng,
        ));
    }
    Ok(report)
}

/// Canonical two-context, two-component mixture used across the
/// verification suite. Defaults pair with the oracle-task network shapes
/// (action `2x2`, observation `1x1x4x4x1`).
pub fn canonical_gmm(action_dim: usize, obs_dim: usize) -> GmmJoint {
    let pattern = |base: f64, dim: usize, phase: usize| -> Vec<f64> {
        (0..dim)
            .map(|j| base * (0.7 + 0.3 * (((j + phase) % 3) as f64 - 1.0)))
            .collect()
    };
    let mean = |a_base: f64, o_base: f64, phase: usize| -> Vec<f64> {
        let mut m = pattern(a_base, action_dim, phase);
        m.extend(pattern(o_base, obs_dim, phase + 1));
        m
    };
    GmmJoint {
        action_dim,
        obs_dim,
        variance: 0.05,
        contexts: vec![
            GmmContext {
                weights: vec![0.5, 0.5],
                means: vec![mean(0.6, -0.45, 0), mean(-0.6, 0.5, 1)],
            },
            GmmContext {
                weights: vec![0.3, 0.7],
                means: vec![mean(0.55, 0.5, 2), mean(-0.5, -0.55, 0)],
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn_vec, rng_from_seed};
    use crate::schedule::{build_schedule, ScheduleKind};

    fn sched() -> NoiseSchedule {
        build_schedule(ScheduleKind::SquaredCosCapV2, 100).unwrap()
    }

    fn single_gaussian(mu_a: f64, mu_o: f64, v: f64) -> GmmJoint {
        GmmJoint {
            action_dim: 2,
            obs_dim: 3,
            variance: v,
            contexts: vec![GmmContext {
                weights: vec![1.0],
                means: vec![vec![mu_a, mu_a, mu_o, mu_o, mu_o]],
            }],
        }
    }

    #[test]
    fn single_component_matches_hand_derived_posterior() {
        // For x0 ~ N(mu, v I): E[eps | x_t] = sqrt(1 - abar) / (abar v + 1 - abar)
        // * (x_t - sqrt(abar) mu), from the joint Gaussian of (eps, x_t).
        let joint = single_gaussian(0.4, -0.2, 0.3);
        let s = sched();
        let mut rng = rng_from_seed(1);
        for &t in &[1usize, 17, 50, 99, 100] {
            let a_t = randn_vec(2, &mut rng);
            let o_t = randn_vec(3, &mut rng);
            let eps = joint
                .analytic_denoiser(0, &a_t, &o_t, t, t, &s, Block::Action)
                .unwrap();
            let ab = s.alpha_bars[t];
            let s2 = ab * 0.3 + (1.0 - ab);
            for (i, &x) in a_t.iter().enumerate() {
                let hand = (1.0 - ab).sqrt() / s2 * (x - ab.sqrt() * 0.4);
                assert!((eps[i] - hand).abs() < 1e-12, "t={t}: {} vs {hand}", eps[i]);
            }
        }
    }

    #[test]
    fn symmetric_mixture_midpoint_denoises_to_midpoint() {
        let joint = GmmJoint {
            action_dim: 2,
            obs_dim: 2,
            variance: 0.1,
            contexts: vec![GmmContext {
                weights: vec![0.5, 0.5],
                means: vec![vec![0.8, 0.8, 0.3, 0.3], vec![-0.8, -0.8, -0.3, -0.3]],
            }],
        };
        let s = sched();
        let t = 40;
        // Noisy point exactly between the two scaled component means.
        let a_t = vec![0.0, 0.0];
        let o_t = vec![0.0, 0.0];
        let x0 = joint
            .posterior_x0(0, &a_t, &o_t, t, t, &s, Block::Action)
            .unwrap();
        for v in x0 {
            assert!(v.abs() < 1e-12, "midpoint must denoise to midpoint, got {v}");
        }
    }

    #[test]
    fn clean_block_noise_request_is_an_error() {
        let joint = single_gaussian(0.0, 0.0, 0.1);
        let s = sched();
        let err = joint.analytic_denoiser(0, &[0.0, 0.0], &[0.0; 3], 0, 50, &s, Block::Action);
        assert!(err.is_err());
    }

    #[test]
    fn marginal_weights_equal_joint_weights_and_blocks_project() {
        let joint = canonical_gmm(4, 16);
        let m = joint.analytic_marginal(1, Block::Action).unwrap();
        assert_eq!(m.weights, joint.contexts[1].weights);
        for (k, mean) in m.means.iter().enumerate() {
            assert_eq!(mean[..], joint.contexts[1].means[k][..4]);
        }
    }

    #[test]
    fn conditional_keeps_means_and_reweights() {
        let joint = canonical_gmm(4, 16);
        let value = vec![0.1, -0.2, 0.3, 0.0];
        let cond = joint
            .analytic_conditional(0, Block::Action, &value)
            .unwrap();
        let ctx = &joint.contexts[0];
        // Independent reweighting computation.
        let mut hand: Vec<f64> = ctx
            .weights
            .iter()
            .zip(&ctx.means)
            .map(|(&w, m)| {
                let sq: f64 = value
                    .iter()
                    .zip(&m[..4])
                    .map(|(x, mu)| (x - mu) * (x - mu))
                    .sum();
                w * (-sq / (2.0 * joint.variance)).exp()
            })
            .collect();
        let z: f64 = hand.iter().sum();
        for h in &mut hand {
            *h /= z;
        }
        for (a, b) in cond.weights.iter().zip(&hand) {
            assert!((a - b).abs() < 1e-12);
        }
        for (k, mean) in cond.means.iter().enumerate() {
            assert_eq!(mean[..], ctx.means[k][4..]);
        }
    }

    #[test]
    fn conditioning_on_a_component_mean_concentrates() {
        let joint = canonical_gmm(4, 16);
        let mean0 = joint.contexts[0].means[0][..4].to_vec();
        let cond = joint
            .analytic_conditional(0, Block::Action, &mean0)
            .unwrap();
        assert!(cond.weights[0] > 0.99, "weights {:?}", cond.weights);
    }

    #[test]
    fn single_component_conditional_equals_marginal() {
        let joint = single_gaussian(0.3, -0.1, 0.2);
        let cond = joint
            .analytic_conditional(0, Block::Action, &[0.9, -0.9])
            .unwrap();
        let marg = joint.analytic_marginal(0, Block::Obs).unwrap();
        assert_eq!(cond.weights, marg.weights);
        assert_eq!(cond.means, marg.means);
    }

    #[test]
    fn marginal_matches_projected_joint_samples() {
        let joint = canonical_gmm(3, 5);
        let rng = &mut rng_from_seed(5);
        let n = 1500;
        let projected: Vec<Vec<f64>> =
            (0..n).map(|_| joint.sample(0, rng).unwrap().0).collect();
        let marg = joint.analytic_marginal(0, Block::Action).unwrap();
        let direct: Vec<Vec<f64>> = (0..n).map(|_| marg.sample(rng)).collect();
        let d = energy_distance(&projected, &direct);
        let thr = calibrate_energy_threshold(&marg, n, 40, rng);
        assert!(d < thr, "energy {d} vs threshold {thr}");
    }

    #[test]
    fn marginalization_limit_matches_standalone_denoiser() {
        // With the obs block pinned at T, the coupled action denoiser must
        // agree with the denoiser of the action-only marginal.
        let joint = canonical_gmm(4, 16);
        let s = sched();
        let marg = joint.analytic_marginal(0, Block::Action).unwrap();
        let marg_joint = GmmJoint {
            action_dim: 4,
            obs_dim: 0,
            variance: marg.variance,
            contexts: vec![GmmContext {
                weights: marg.weights.clone(),
                means: marg.means.clone(),
            }],
        };
        let mut rng = rng_from_seed(9);
        let mut sup: f64 = 0.0;
        for _ in 0..500 {
            let (a0, _) = joint.sample(0, &mut rng).unwrap();
            let t_a =rng.gen_range(1..=100usize);
            let eps = randn_vec(4, &mut rng);
            let mut a_t = vec![0.0; 4];
            s.add_noise_slice(&a0, &eps, t_a, &mut a_t);
            let o_t = randn_vec(16, &mut rng);
            let coupled = joint
                .analytic_denoiser(0, &a_t, &o_t, t_a, 100, &s, Block::Action)
                .unwrap();
            let standalone = marg_joint
                .analytic_denoiser(0, &a_t, &[], t_a, 0, &s, Block::Action)
                .unwrap();
            for (c, st) in coupled.iter().zip(&standalone) {
                sup = sup.max((c - st).abs());
            }
        }
        assert!(sup < 1e-3, "sup-norm {sup}");
    }

    #[test]
    fn denoiser_is_pure_and_deterministic() {
        let joint = canonical_gmm(2, 4);
        let s = sched();
        let a_t = vec![0.3, -0.4];
        let o_t = vec![0.1, 0.2, -0.1, 0.0];
        let x = joint
            .analytic_denoiser(0, &a_t, &o_t, 30, 60, &s, Block::Obs)
            .unwrap();
        let y = joint
            .analytic_denoiser(0, &a_t, &o_t, 30, 60, &s, Block::Obs)
            .unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
