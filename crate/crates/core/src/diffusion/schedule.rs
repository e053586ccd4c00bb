use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta DDPM schedule. `alpha_bar[0] = 1` is the clean image;
/// `alpha_bar[t] = prod_{i<=t} (1 - beta[i-1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps < 2 {
            return Err(Error::config("steps", format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            config,
            beta,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t > self.steps() {
            return Err(Error::Range(format!("timestep {t} > T = {}", self.steps())));
        }
        if z0.shape() != eps.shape() {
            return Err(Error::Dimension(format!(
                "noise shape {:?} != latent shape {:?}",
                eps.shape(),
                z0.shape()
            )));
        }
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.zip_map(eps, |z, e| a * z + b * e))
    }

    /// The `count` sampling timesteps in descending order, evenly spread over
    /// `1..=T` and always starting at `T`.
    pub fn sampling_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.steps() {
            return Err(Error::config(
                "sampling_steps",
                format!("must be in [1, {}], got {count}", self.steps()),
            ));
        }
        let t = self.steps();
        Ok((1..=count).rev().map(|i| i * t / count).collect())
    }
}
