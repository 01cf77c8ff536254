//! Noise schedules and the forward diffusion process.
//!
//! Tables are indexed directly by timestep: slot 0 is the clean-data
//! convention (`alpha_bar[0] = 1`), so "t = 0 conditions on clean data" is
//! literal. `beta`, `alpha`, `sigma` are defined for `t in 1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// `alpha_bar(t) ∝ cos^2(((t/T + s)/(1 + s)) * pi/2)` with `s = 0.008`,
    /// betas clipped at 0.999.
    SquaredCosCapV2,
    /// Betas linearly interpolated between 1e-4 and 2e-2.
    Linear,
}

const COS_OFFSET: f64 = 0.008;
const BETA_CLIP: f64 = 0.999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Number of diffusion steps T.
    pub num_steps: usize,
    /// `betas[t]` for t in 1..=T; slot 0 is 0 by convention.
    pub betas: Vec<f64>,
    /// `alphas[t] = 1 - betas[t]`; slot 0 is 1.
    pub alphas: Vec<f64>,
    /// `alpha_bars[t] = prod_{i<=t} alphas[i]`, with `alpha_bars[0] = 1`.
    pub alpha_bars: Vec<f64>,
    /// Posterior standard deviations `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`;
    /// slot 0 is 0, and `sigmas[1] = 0` follows from `abar_0 = 1`.
    pub sigmas: Vec<f64>,
    pub kind: ScheduleKind,
}

/// Builds the lookup tables for a `T`-step schedule.
pub fn build_schedule(kind: ScheduleKind, num_steps: usize) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(CoreError::invalid("build_schedule: T must be >= 1"));
    }
    let t_max = num_steps;
    let mut betas = vec![0.0; t_max + 1];
    match kind {
        ScheduleKind::SquaredCosCapV2 => {
            let f = |t: f64| -> f64 {
                let x = ((t / t_max as f64 + COS_OFFSET) / (1.0 + COS_OFFSET))
                    * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            for t in 1..=t_max {
                let beta = 1.0 - (f(t as f64) / f0) / (f((t - 1) as f64) / f0);
                betas[t] = beta.min(BETA_CLIP);
            }
        }
        ScheduleKind::Linear => {
            for t in 1..=t_max {
                let frac = if t_max == 1 {
                    0.0
                } else {
                    (t - 1) as f64 / (t_max - 1) as f64
                };
                betas[t] = LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * frac;
            }
        }
    }
    let mut alphas = vec![1.0; t_max + 1];
    let mut alpha_bars = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
    }
    let mut sigmas = vec![0.0; t_max + 1];
    for t in 1..=t_max {
        let var = betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
        sigmas[t] = var.sqrt();
    }
    Ok(NoiseSchedule {
        num_steps,
        betas,
        alphas,
        alpha_bars,
        sigmas,
        kind,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize, op: &str) -> Result<()> {
        if t > self.num_steps {
            return Err(CoreError::invalid(format!(
                "{op}: timestep {t} out of range 0..={}",
                self.num_steps
            )));
        }
        Ok(())
    }

    /// Forward process on raw buffers: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise_slice(&self, x0: &[f64], eps: &[f64], t: usize, out: &mut [f64]) {
        let a = self.alpha_bars[t].sqrt();
        let b = (1.0 - self.alpha_bars[t]).sqrt();
        for i in 0..x0.len() {
            out[i] = a * x0[i] + b * eps[i];
        }
    }
}

/// Forward process `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
///
/// `t = 0` returns `x0` exactly (`abar_0 = 1`).
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape != eps.shape {
        return Err(CoreError::ShapeMismatch {
            op: "add_noise",
            lhs: x0.shape.clone(),
            rhs: eps.shape.clone(),
        });
    }
    sched.check_t(t, "add_noise")?;
    let mut out = Tensor::zeros(&x0.shape);
    sched.add_noise_slice(&x0.data, &eps.data, t, &mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn_vec, rng_from_seed};

    #[test]
    fn cap_v2_invariants_at_t100() {
        let s = build_schedule(ScheduleKind::SquaredCosCapV2, 100).unwrap();
        assert_eq!(s.alpha_bars[0], 1.0);
        for t in 1..=100 {
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1], "abar not decreasing at {t}");
            assert!(s.betas[t] <= BETA_CLIP + 1e-15, "beta {t} = {}", s.betas[t]);
            assert!(s.betas[t] > 0.0);
        }
        assert!(s.alpha_bars[100] < 1e-3, "abar_100 = {}", s.alpha_bars[100]);
    }

    #[test]
    fn linear_t10_matches_direct_interpolation() {
        let s = build_schedule(ScheduleKind::Linear, 10).unwrap();
        // Independent recomputation of the interpolation and the product.
        let mut prod = 1.0;
        for t in 1..=10 {
            let frac = (t - 1) as f64 / 9.0;
            let expect = 1e-4 + (2e-2 - 1e-4) * frac;
            assert_eq!(s.betas[t], expect);
            prod *= 1.0 - expect;
        }
        assert_eq!(s.alpha_bars[10], prod);
    }

    #[test]
    fn zero_steps_is_an_error() {
        assert!(build_schedule(ScheduleKind::SquaredCosCapV2, 0).is_err());
    }

    #[test]
    fn add_noise_t0_returns_x0() {
        let s = build_schedule(ScheduleKind::SquaredCosCapV2, 20).unwrap();
        let mut rng = rng_from_seed(1);
        let x0 = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let xt = add_noise(&x0, &eps, 0, &s).unwrap();
        assert_eq!(xt.data, x0.data);
    }

    #[test]
    fn add_noise_zero_eps_scales_x0() {
        let s = build_schedule(ScheduleKind::SquaredCosCapV2, 20).unwrap();
        let mut rng = rng_from_seed(2);
        let x0 = Tensor::randn(&[4], &mut rng);
        let eps = Tensor::zeros(&[4]);
        let t = 7;
        let xt = add_noise(&x0, &eps, t, &s).unwrap();
        let a = s.alpha_bars[t].sqrt();
        for (o, i) in xt.data.iter().zip(&x0.data) {
            assert_eq!(*o, a * i);
        }
    }

    #[test]
    fn add_noise_out_of_range_t_errors() {
        let s = build_schedule(ScheduleKind::Linear, 5).unwrap();
        let x0 = Tensor::zeros(&[2]);
        let eps = Tensor::zeros(&[2]);
        assert!(add_noise(&x0, &eps, 6, &s).is_err());
    }

    #[test]
    fn monte_carlo_moments_match_forward_process() {
        let s = build_schedule(ScheduleKind::SquaredCosCapV2, 100).unwrap();
        let mut rng = rng_from_seed(33);
        let x0 = 0.4;
        let t = 37;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eps: f64 = randn_vec(1, &mut rng)[0];
            let xt = s.alpha_bars[t].sqrt() * x0 + (1.0 - s.alpha_bars[t]).sqrt() * eps;
            sum += xt;
            sumsq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expect_mean = s.alpha_bars[t].sqrt() * x0;
        let expect_var = 1.0 - s.alpha_bars[t];
        // Three standard errors.
        let se_mean = (expect_var / n as f64).sqrt();
        let se_var = expect_var * (2.0 / n as f64).sqrt();
        assert!((mean - expect_mean).abs() < 3.0 * se_mean);
        assert!((var - expect_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn snr_strictly_decreases() {
        for kind in [ScheduleKind::SquaredCosCapV2, ScheduleKind::Linear] {
            let s = build_schedule(kind, 100).unwrap();
            let snr = |t: usize| s.alpha_bars[t] / (1.0 - s.alpha_bars[t]);
            for t in 2..=100 {
                assert!(snr(t) < snr(t - 1), "{kind:?} SNR not decreasing at {t}");
            }
        }
    }

    #[test]
    fn add_noise_is_linear_in_both_arguments() {
        let s = build_schedule(ScheduleKind::SquaredCosCapV2, 50).unwrap();
        let mut rng = rng_from_seed(4);
        let x1 = Tensor::randn(&[5], &mut rng);
        let x2 = Tensor::randn(&[5], &mut rng);
        let e1 = Tensor::randn(&[5], &mut rng);
        let e2 = Tensor::randn(&[5], &mut rng);
        let t = 21;
        let sum_x = Tensor::new(
            x1.data.iter().zip(&x2.data).map(|(a, b)| a + b).collect(),
            vec![5],
        )
        .unwrap();
        let sum_e = Tensor::new(
            e1.data.iter().zip(&e2.data).map(|(a, b)| a + b).collect(),
            vec![5],
        )
        .unwrap();
        let lhs = add_noise(&sum_x, &sum_e, t, &s).unwrap();
        let a = add_noise(&x1, &e1, t, &s).unwrap();
        let b = add_noise(&x2, &e2, t, &s).unwrap();
        for i in 0..5 {
            assert!((lhs.data[i] - (a.data[i] + b.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rebuild_is_bitwise_identical() {
        for kind in [ScheduleKind::SquaredCosCapV2, ScheduleKind::Linear] {
            let a = build_schedule(kind, 100).unwrap();
            let b = build_schedule(kind, 100).unwrap();
            assert!(a
                .alpha_bars
                .iter()
                .zip(&b.alpha_bars)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.betas.iter().zip(&b.betas).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.sigmas.iter().zip(&b.sigmas).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn posterior_sigma_formula_holds() {
        let s = build_schedule(ScheduleKind::SquaredCosCapV2, 100).unwrap();
        assert_eq!(s.sigmas[1], 0.0);
        for t in 2..=100 {
            let var = s.betas[t] * (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]);
            assert_eq!(s.sigmas[t], var.sqrt());
        }
    }
}
