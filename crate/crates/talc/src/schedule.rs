//! Variance-preserving diffusion noise schedule and forward/reverse process.
//!
//! The schedule is a linear per-step variance ramp. With cumulative products
//! `abar_t = prod(1 - v_s)` over per-step variances `v_s`, the stored signal
//! and noise scales are `alpha_t = sqrt(abar_t)` and `beta_t = sqrt(1 -
//! abar_t)`, so `alpha^2 + beta^2 = 1` by construction. The forward process
//! is `z_t = alpha_t * z + beta_t * eps`; the reverse process is the standard
//! ancestral posterior step for an epsilon-predicting denoiser. Timesteps are
//! 1-based.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::video::VideoTensor;

/// Serializable schedule parameters (stored in checkpoint headers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Documentation of the timestep convention used everywhere.
    #[serde(default = "one_based")]
    pub indexing: TimestepIndexing,
}

fn one_based() -> TimestepIndexing {
    TimestepIndexing::OneBased
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepIndexing {
    OneBased,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            indexing: TimestepIndexing::OneBased,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Number of steps T; valid timesteps are 1..=T.
    pub num_steps: usize,
    /// Signal scale sqrt(abar_t), index 0 holds t=1.
    pub alpha: Vec<f64>,
    /// Noise scale sqrt(1 - abar_t).
    pub beta: Vec<f64>,
    /// Per-step retention abar_t / abar_{t-1} (abar_0 = 1).
    step_alpha: Vec<f64>,
    /// Posterior standard deviation for the ancestral step at t.
    posterior_sigma: Vec<f64>,
    /// Training timestep each index maps to (identity for a base schedule;
    /// the selected subset for a strided inference schedule).
    pub train_timestep: Vec<usize>,
    pub config: ScheduleConfig,
}

/// Build the training schedule: a linear per-step variance ramp from
/// `beta_min` to `beta_max` over `num_steps` steps.
pub fn make_schedule(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if num_steps < 1 {
        return Err(TalcError::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(TalcError::Config(format!(
            "invalid variance bounds ({beta_min}, {beta_max}): need 0 < min <= max < 1"
        )));
    }
    let mut abar = Vec::with_capacity(num_steps);
    let mut cum = 1.0;
    for t in 0..num_steps {
        let frac = if num_steps == 1 {
            0.0
        } else {
            t as f64 / (num_steps - 1) as f64
        };
        let v = beta_min + frac * (beta_max - beta_min);
        cum *= 1.0 - v;
        abar.push(cum);
    }
    let config = ScheduleConfig {
        num_steps,
        beta_min,
        beta_max,
        indexing: TimestepIndexing::OneBased,
    };
    Ok(NoiseSchedule::from_abar(
        abar,
        (1..=num_steps).collect(),
        config,
    ))
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
        make_schedule(cfg.num_steps, cfg.beta_min, cfg.beta_max)
    }

    fn from_abar(abar: Vec<f64>, train_timestep: Vec<usize>, config: ScheduleConfig) -> Self {
        let n = abar.len();
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        let mut step_alpha = Vec::with_capacity(n);
        let mut posterior_sigma = Vec::with_capacity(n);
        for t in 0..n {
            let prev = if t == 0 { 1.0 } else { abar[t - 1] };
            let a = abar[t];
            alpha.push(a.sqrt());
            beta.push((1.0 - a).sqrt());
            let step = a / prev;
            step_alpha.push(step);
            // sigma_t^2 = (1 - step) * (1 - abar_{t-1}) / (1 - abar_t); zero at t=1.
            let var = if t == 0 {
                0.0
            } else {
                (1.0 - step) * (1.0 - prev) / (1.0 - a)
            };
            posterior_sigma.push(var.max(0.0).sqrt());
        }
        NoiseSchedule {
            num_steps: n,
            alpha,
            beta,
            step_alpha,
            posterior_sigma,
            train_timestep,
            config,
        }
    }

    fn check_tau(&self, tau: usize) -> Result<usize> {
        if tau < 1 || tau > self.num_steps {
            return Err(TalcError::Index(format!(
                "timestep {tau} out of range 1..={}",
                self.num_steps
            )));
        }
        Ok(tau - 1)
    }

    pub fn alpha_at(&self, tau: usize) -> Result<f64> {
        Ok(self.alpha[self.check_tau(tau)?])
    }

    pub fn beta_at(&self, tau: usize) -> Result<f64> {
        Ok(self.beta[self.check_tau(tau)?])
    }

    /// Training timestep value the denoiser should be conditioned on.
    pub fn train_timestep_at(&self, tau: usize) -> Result<usize> {
        Ok(self.train_timestep[self.check_tau(tau)?])
    }

    /// Evenly spaced subset of this schedule for inference with fewer steps.
    /// Always includes t=1 and t=T.
    pub fn strided(&self, steps: usize) -> Result<NoiseSchedule> {
        if steps < 1 {
            return Err(TalcError::Config("need at least one inference step".into()));
        }
        let steps = steps.min(self.num_steps);
        let mut picks = Vec::with_capacity(steps);
        if steps == 1 {
            picks.push(1);
        } else {
            for i in 0..steps {
                let t = 1.0
                    + (i as f64) * (self.num_steps as f64 - 1.0) / (steps as f64 - 1.0);
                let t = t.round() as usize;
                if picks.last() != Some(&t) {
                    picks.push(t);
                }
            }
        }
        let abar: Vec<f64> = picks
            .iter()
            .map(|&t| {
                let a = self.alpha[t - 1];
                a * a
            })
            .collect();
        Ok(NoiseSchedule::from_abar(abar, picks, self.config))
    }
}

/// Forward process: `alpha_tau * z + beta_tau * eps` elementwise.
pub fn add_noise(
    z: &VideoTensor,
    tau: usize,
    eps: &VideoTensor,
    schedule: &NoiseSchedule,
) -> Result<VideoTensor> {
    if z.data.len() != eps.data.len() {
        return Err(TalcError::Shape(format!(
            "add_noise: video has {} elements, eps has {}",
            z.data.len(),
            eps.data.len()
        )));
    }
    let a = schedule.alpha_at(tau)?;
    let b = schedule.beta_at(tau)?;
    let data: Vec<f64> = z
        .data
        .iter()
        .zip(&eps.data)
        .map(|(zv, ev)| a * zv + b * ev)
        .collect();
    VideoTensor::from_data(z.frames, z.channels, z.height, z.width, data)
}

/// One reverse (ancestral) step: posterior mean given the noise prediction,
/// plus fresh posterior noise for tau > 1. The step at tau = 1 is
/// deterministic.
pub fn ancestral_step(
    z_tau: &VideoTensor,
    eps_hat: &VideoTensor,
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<VideoTensor> {
    if z_tau.data.len() != eps_hat.data.len() {
        return Err(TalcError::Shape(format!(
            "ancestral_step: video has {} elements, eps_hat has {}",
            z_tau.data.len(),
            eps_hat.data.len()
        )));
    }
    let idx = schedule.check_tau(tau)?;
    let step = schedule.step_alpha[idx];
    let beta = schedule.beta[idx];
    let sigma = schedule.posterior_sigma[idx];
    let mean_scale = 1.0 / step.sqrt();
    let eps_coeff = (1.0 - step) / beta;
    let data: Vec<f64> = z_tau
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(zv, ev)| {
            let mean = mean_scale * (zv - eps_coeff * ev);
            if tau > 1 {
                mean + sigma * rng.normal()
            } else {
                mean
            }
        })
        .collect();
    VideoTensor::from_data(z_tau.frames, z_tau.channels, z_tau.height, z_tau.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn_video(frames: usize, rng: &mut Rng) -> VideoTensor {
        let mut v = VideoTensor::zeros(frames, 3, 4, 4);
        v.data = rng.fill_normal(v.numel());
        v
    }

    #[test]
    fn single_step_closed_form() {
        let b = 0.25;
        let s = make_schedule(1, b, b).unwrap();
        assert!((s.alpha_at(1).unwrap() - (1.0 - b).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn default_ramp_ends_near_pure_noise() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_at(1000).unwrap() < 0.1);
        assert!(s.alpha_at(1).unwrap() > 0.999);
    }

    #[test]
    fn variance_preserving_identity() {
        let s = make_schedule(500, 1e-4, 2e-2).unwrap();
        for t in 1..=500 {
            let a = s.alpha_at(t).unwrap();
            let b = s.beta_at(t).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_decreases_beta_increases() {
        let s = make_schedule(200, 1e-4, 2e-2).unwrap();
        for t in 2..=200 {
            assert!(s.alpha_at(t).unwrap() < s.alpha_at(t - 1).unwrap());
            assert!(s.beta_at(t).unwrap() > s.beta_at(t - 1).unwrap());
        }
    }

    #[test]
    fn snr_strictly_decreases() {
        let s = make_schedule(100, 1e-3, 2e-2).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..=100 {
            let snr = s.alpha_at(t).unwrap() / s.beta_at(t).unwrap();
            assert!(snr < prev);
            prev = snr;
        }
    }

    #[test]
    fn invalid_bounds_are_config_errors() {
        assert!(make_schedule(0, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 0.0, 2e-2).is_err());
        assert!(make_schedule(10, 0.5, 0.2).is_err());
        assert!(make_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn add_noise_identity_when_beta_zero() {
        // A vanishing step variance rounds abar to exactly 1 in f64, so
        // alpha = 1 and beta = 0.
        let s = make_schedule(1, 1e-18, 1e-18).unwrap();
        assert_eq!(s.beta_at(1).unwrap(), 0.0);
        let mut rng = Rng::new(1);
        let z = randn_video(2, &mut rng);
        let eps = randn_video(2, &mut rng);
        let noised = add_noise(&z, 1, &eps, &s).unwrap();
        assert_eq!(noised.data, z.data);
    }

    #[test]
    fn add_noise_pure_noise_when_clean_zero() {
        let s = make_schedule(10, 1e-2, 5e-2).unwrap();
        let mut rng = Rng::new(2);
        let z = VideoTensor::zeros(2, 3, 4, 4);
        let eps = randn_video(2, &mut rng);
        let tau = 7;
        let noised = add_noise(&z, tau, &eps, &s).unwrap();
        let b = s.beta_at(tau).unwrap();
        for (n, e) in noised.data.iter().zip(&eps.data) {
            assert!((n - b * e).abs() < 1e-15);
        }
    }

    #[test]
    fn add_noise_matches_formula_oracle() {
        let s = make_schedule(50, 1e-3, 3e-2).unwrap();
        let mut rng = Rng::new(3);
        let z = randn_video(3, &mut rng);
        let eps = randn_video(3, &mut rng);
        let tau = 23;
        let out = add_noise(&z, tau, &eps, &s).unwrap();
        let (a, b) = (s.alpha_at(tau).unwrap(), s.beta_at(tau).unwrap());
        for i in 0..out.data.len() {
            assert!((out.data[i] - (a * z.data[i] + b * eps.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn add_noise_rejects_out_of_range_tau() {
        let s = make_schedule(10, 1e-3, 2e-2).unwrap();
        let z = VideoTensor::zeros(1, 3, 4, 4);
        assert!(add_noise(&z, 0, &z, &s).is_err());
        assert!(add_noise(&z, 11, &z, &s).is_err());
    }

    #[test]
    fn round_trip_inversion() {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        let mut rng = Rng::new(4);
        let z = randn_video(2, &mut rng);
        let eps = randn_video(2, &mut rng);
        for tau in [1, 37, 100] {
            let noised = add_noise(&z, tau, &eps, &s).unwrap();
            let (a, b) = (s.alpha_at(tau).unwrap(), s.beta_at(tau).unwrap());
            for i in 0..z.data.len() {
                let rec = (noised.data[i] - b * eps.data[i]) / a;
                assert!((rec - z.data[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tau_one_step_is_deterministic() {
        let s = make_schedule(10, 1e-3, 2e-2).unwrap();
        let mut rng1 = Rng::new(5);
        let mut rng2 = Rng::new(999);
        let mut rng3 = Rng::new(5);
        let z = randn_video(1, &mut rng1);
        let e = randn_video(1, &mut rng1);
        let a = ancestral_step(&z, &e, 1, &s, &mut rng2).unwrap();
        let b = ancestral_step(&z, &e, 1, &s, &mut rng3).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn perfect_eps_single_step_recovers_clean() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let mut rng = Rng::new(6);
        let z0 = randn_video(1, &mut rng);
        let eps = randn_video(1, &mut rng);
        let z1 = add_noise(&z0, 1, &eps, &s).unwrap();
        let rec = ancestral_step(&z1, &eps, 1, &s, &mut rng).unwrap();
        for (r, c) in rec.data.iter().zip(&z0.data) {
            assert!((r - c).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_chain_recovers_clean_input() {
        // Run the reverse chain feeding at each step the epsilon that exactly
        // explains the current state relative to the clean video.
        let s = make_schedule(10, 5e-3, 8e-2).unwrap();
        let mut rng = Rng::new(7);
        let clean = randn_video(2, &mut rng);
        let mut z = randn_video(2, &mut rng); // arbitrary start
        for tau in (1..=10).rev() {
            let a = s.alpha_at(tau).unwrap();
            let b = s.beta_at(tau).unwrap();
            let eps_hat: Vec<f64> = z
                .data
                .iter()
                .zip(&clean.data)
                .map(|(zt, c)| (zt - a * c) / b)
                .collect();
            let eps_v =
                VideoTensor::from_data(z.frames, z.channels, z.height, z.width, eps_hat).unwrap();
            z = ancestral_step(&z, &eps_v, tau, &s, &mut rng).unwrap();
        }
        for (r, c) in z.data.iter().zip(&clean.data) {
            assert!((r - c).abs() < 1e-8, "residual {}", (r - c).abs());
        }
    }

    #[test]
    fn zero_eps_zero_noise_is_pure_rescale() {
        let s = make_schedule(10, 1e-3, 2e-2).unwrap();
        let mut rng = Rng::new(8);
        let z = randn_video(1, &mut rng);
        let zero = VideoTensor::zeros(1, 3, 4, 4);
        // tau = 1 injects no noise.
        let out = ancestral_step(&z, &zero, 1, &s, &mut rng).unwrap();
        let scale = out.data[0] / z.data[0];
        assert!(scale > 0.0);
        for (o, i) in out.data.iter().zip(&z.data) {
            assert!((o - scale * i).abs() < 1e-12);
            assert_eq!(o.signum(), i.signum());
        }
    }

    #[test]
    fn strided_subset_includes_endpoints() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let sub = s.strided(100).unwrap();
        assert_eq!(sub.train_timestep.first(), Some(&1));
        assert_eq!(sub.train_timestep.last(), Some(&1000));
        assert_eq!(sub.num_steps, 100);
        // The subset preserves the cumulative signal levels of the parent.
        for (i, &t) in sub.train_timestep.iter().enumerate() {
            assert!((sub.alpha[i] - s.alpha[t - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_oracle_chain_still_recovers_clean() {
        let s = make_schedule(100, 1e-3, 2e-2).unwrap();
        let sub = s.strided(10).unwrap();
        let mut rng = Rng::new(9);
        let clean = randn_video(1, &mut rng);
        let mut z = randn_video(1, &mut rng);
        for tau in (1..=sub.num_steps).rev() {
            let a = sub.alpha_at(tau).unwrap();
            let b = sub.beta_at(tau).unwrap();
            let eps_hat: Vec<f64> = z
                .data
                .iter()
                .zip(&clean.data)
                .map(|(zt, c)| (zt - a * c) / b)
                .collect();
            let eps_v =
                VideoTensor::from_data(z.frames, z.channels, z.height, z.width, eps_hat).unwrap();
            z = ancestral_step(&z, &eps_v, tau, &sub, &mut rng).unwrap();
        }
        for (r, c) in z.data.iter().zip(&clean.data) {
            assert!((r - c).abs() < 1e-8);
        }
    }
}
