//! Noise schedule for the forward feature-noising process and the
//! degradation-removal weights used by the reverse sampler.
//!
//! The forward process keeps the feature unscaled and accumulates noise:
//! `F_t = F_in + alpha_bar(t) * eps` with
//! `alpha_bar(t) = sqrt(sum_{i<=t} alpha_i^2)` and `alpha_bar(T) = 1`.
//! `beta_bar` weights how much of the predicted degradation each reverse
//! stride removes; the literal single-shot removal is kept behind a flag at
//! the sampler level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    steps: usize,
    /// alpha[t-1] is the per-step coefficient for step t in 1..=T.
    alpha: Vec<f64>,
    /// alpha_bar[t] for t in 0..=T, alpha_bar[0] = 0, alpha_bar[T] = 1.
    alpha_bar: Vec<f64>,
    /// beta_bar[t] for t in 0..=T, beta_bar[0] = 0, beta_bar[T] = 1.
    beta_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArg("schedule needs at least one step".into()));
    }
    match kind {
        ScheduleKind::Linear => {
            let t_f = steps as f64;
            let alpha_bar: Vec<f64> = (0..=steps).map(|t| t as f64 / t_f).collect();
            let alpha: Vec<f64> = (1..=steps)
                .map(|t| (alpha_bar[t] * alpha_bar[t] - alpha_bar[t - 1] * alpha_bar[t - 1]).sqrt())
                .collect();
            let beta_bar = alpha_bar.clone();
            Ok(NoiseSchedule { steps, alpha, alpha_bar, beta_bar })
        }
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Per-step coefficient, t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "alpha({t}) out of 1..={}", self.steps);
        self.alpha[t - 1]
    }

    /// Cumulative coefficient, t in 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "alpha_bar({t}) out of 0..={}", self.steps);
        self.alpha_bar[t]
    }

    /// Degradation-removal weight, t in 0..=T.
    pub fn beta_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "beta_bar({t}) out of 0..={}", self.steps);
        self.beta_bar[t]
    }
}

/// Forward noising: `F_in + alpha_bar(t) * eps`, the input feature unscaled.
pub fn forward_noise(f_in: &Tensor, t: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    if t < 1 || t > sched.steps() {
        return Err(Error::InvalidArg(format!(
            "forward_noise step {t} outside 1..={}",
            sched.steps()
        )));
    }
    if f_in.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "forward_noise: feature {:?} vs eps {:?}",
            f_in.dims(),
            eps.dims()
        )));
    }
    let a = sched.alpha_bar(t) as f32;
    f_in.zip_map(eps, |f, e| f + a * e)
}
