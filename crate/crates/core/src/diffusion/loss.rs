use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::denoiser::NoisePredictor;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::TokenSequence;
use crate::error::{Error, Result};
use crate::params::TrainScope;
use crate::seed::{self, Rng};

/// A clean latent with its prompt, a drawn timestep and the drawn noise.
#[derive(Clone, Debug)]
pub struct NoisedSample {
    pub z0: Tensor,
    pub tokens: TokenSequence,
    pub t: usize,
    pub eps: Tensor,
}

impl NoisedSample {
    pub fn noised(&self, schedule: &NoiseSchedule) -> Result<Tensor> {
        schedule.add_noise(&self.z0, self.t, &self.eps)
    }
}

/// Draws `t ~ Uniform{1..T}` and `eps ~ N(0, I)` for each `(z0, tokens)`.
pub fn draw_samples(
    rng: &mut Rng,
    schedule: &NoiseSchedule,
    pairs: &[(Tensor, TokenSequence)],
) -> Vec<NoisedSample> {
    use rand::Rng as _;
    pairs
        .iter()
        .map(|(z0, tokens)| {
            let t = rng.random_range(1..=schedule.steps());
            let eps = seed::normal_tensor(rng, z0.shape().to_vec());
            NoisedSample {
                z0: z0.clone(),
                tokens: tokens.clone(),
                t,
                eps,
            }
        })
        .collect()
}

/// `mean ||eps - eps_theta(z_t | c, t)||^2`, averaged over every element of
/// every batch item.
pub fn ldm_loss<M: NoisePredictor + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    batch: &[NoisedSample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("ldm_loss batch".into()));
    }
    let mut total: Option<Var> = None;
    for s in batch {
        let zt = g.constant(s.noised(model.schedule())?);
        let pred = model.predict(g, params, zt, &s.tokens, s.t);
        let target = g.constant(s.eps.clone());
        let l = g.mse(pred.eps, target);
        total = Some(match total {
            Some(acc) => g.add(acc, l),
            None => l,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
}

/// Scalar value of [`ldm_loss`] with all parameters frozen.
pub fn ldm_loss_value<M: NoisePredictor + ?Sized>(model: &M, batch: &[NoisedSample]) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, &TrainScope::Frozen);
    let l = ldm_loss(&mut g, model, &params, batch)?;
    Ok(g.scalar_value(l))
}
