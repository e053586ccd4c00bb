//! Ancestral DDPM sampling with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::diffusion::denoiser::{predict_noise, NoisePredictor};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::TokenSequence;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            guidance_scale: 7.0,
        }
    }
}

impl SamplerConfig {
    /// 50 steps at guidance scale 4: the CPU-scale setting used for priors,
    /// memory candidates and evaluation.
    pub fn desk() -> Self {
        Self {
            steps: 50,
            guidance_scale: 4.0,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::config(
                "sampler.steps",
                format!("{} not in [1, T = {}]", self.steps, schedule.steps()),
            ));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::config("sampler.guidance_scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn guided_eps<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &Tensor,
    cond: &TokenSequence,
    uncond: &TokenSequence,
    t: usize,
    scale: f64,
) -> Result<Tensor> {
    let (eps_c, _) = predict_noise(model, z, cond, t, false)?;
    let (eps_u, _) = predict_noise(model, z, uncond, t, false)?;
    Ok(eps_u.zip_map(&eps_c, |u, c| u + scale * (c - u)))
}

/// One ancestral step from `t` to `t_prev` using the clipped clean-image
/// estimate; draws noise from `rng` only when `t_prev > 0`.
pub fn ddpm_step(
    schedule: &NoiseSchedule,
    z: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    rng: &mut Rng,
) -> Tensor {
    let ab = schedule.alpha_bar();
    let (ab_t, ab_prev) = (ab[t], ab[t_prev]);
    let beta = 1.0 - ab_t / ab_prev;
    let x0 = z.zip_map(eps, |z, e| {
        ((z - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt()).clamp(-1.0, 1.0)
    });
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = x0.zip_map(z, |x, z| c0 * x + ct * z);
    if t_prev == 0 {
        return mean;
    }
    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
    let noise = seed::normal_tensor(rng, z.shape().to_vec());
    mean.zip_map(&noise, |m, n| m + sigma * n)
}

/// Pairs of (timestep, previous timestep) visited by the sampler.
pub fn timestep_pairs(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<(usize, usize)>> {
    let ts = schedule.sampling_timesteps(steps)?;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
        .collect())
}

/// Text-conditioned sampling with classifier-free guidance. The codec is the
/// identity, so the final latent is the image.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    prompt: &str,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    let tokens = model.tokenize(prompt)?;
    sample_tokens(model, &tokens, config, seed)
}

pub fn sample_tokens<M: NoisePredictor + ?Sized>(
    model: &M,
    tokens: &TokenSequence,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    config.validate(model.schedule())?;
    let uncond = model.unconditional();
    let mut rng = seed::rng(seed);
    let mut z = seed::normal_tensor(&mut rng, model.latent_shape().to_vec());
    for (t, t_prev) in timestep_pairs(model.schedule(), config.steps)? {
        let eps = guided_eps(model, &z, tokens, &uncond, t, config.guidance_scale)?;
        z = ddpm_step(model.schedule(), &z, &eps, t, t_prev, &mut rng);
    }
    Ok(z)
}

/// Sampling from the unconditional (empty-prompt) prediction only.
pub fn sample_unconditional<M: NoisePredictor + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    config.validate(model.schedule())?;
    let uncond = model.unconditional();
    let mut rng = seed::rng(seed);
    let mut z = seed::normal_tensor(&mut rng, model.latent_shape().to_vec());
    for (t, t_prev) in timestep_pairs(model.schedule(), config.steps)? {
        let (eps, _) = predict_noise(model, &z, &uncond, t, false)?;
        z = ddpm_step(model.schedule(), &z, &eps, t, t_prev, &mut rng);
    }
    Ok(z)
}
