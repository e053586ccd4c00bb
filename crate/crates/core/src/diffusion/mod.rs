//! Toy latent diffusion backbone. The latent codec is the identity, so
//! images and latents are the same `[3, H, W]` tensors in roughly `[-1, 1]`.

pub mod checkpoint;
pub mod denoiser;
pub mod loss;
pub mod sampler;
pub mod schedule;
pub mod text;

pub use denoiser::{
    predict_noise, ArchConfig, AttentionStack, DenoiserModel, NoisePredictor, Prediction,
};
pub use loss::{draw_samples, ldm_loss, ldm_loss_value, NoisedSample};
pub use sampler::{sample, sample_tokens, sample_unconditional, SamplerConfig};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig};
pub use text::{TokenSequence, Vocabulary};
