use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::diffusion::{draw_samples, ldm_loss, ldm_loss_value, DenoiserModel, NoisePredictor, NoisedSample, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, TrainScope};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Held-out evaluation interval, in steps.
    pub eval_every: usize,
    /// Evaluations without a new best before stopping.
    pub patience: usize,
    /// Probability of training a sample with the empty prompt.
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 2000,
            heldout_size: 64,
            max_steps: 6000,
            batch: 8,
            lr: 2e-3,
            eval_every: 250,
            patience: 3,
            cond_dropout: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::config(
                "pretrain",
                "max_steps, batch, eval_every and patience must be positive",
            ));
        }
        if self.corpus_size == 0 || self.heldout_size == 0 {
            return Err(Error::config("pretrain", "corpus and held-out sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("pretrain.cond_dropout", "must be in [0, 1)"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps_run: usize,
    /// `(step, held-out loss)`, starting with step 0.
    pub curve: Vec<(usize, f64)>,
    pub converged_early: bool,
}

impl PretrainReport {
    pub fn start_loss(&self) -> f64 {
        self.curve[0].1
    }

    pub fn end_loss(&self) -> f64 {
        self.curve.last().expect("non-empty curve").1
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,heldout_loss\n");
        for (step, l) in &self.curve {
            s.push_str(&format!("{step},{l}\n"));
        }
        s
    }
}

fn tokenize_all(model: &DenoiserModel, pairs: &[(Tensor, String)]) -> Result<Vec<(Tensor, TokenSequence)>> {
    pairs
        .iter()
        .map(|(x, p)| Ok((x.clone(), model.tokenize(p)?)))
        .collect()
}

/// Trains every parameter on generic image/prompt pairs until the held-out
/// denoising loss stops improving (no new best for `patience` evaluations)
/// or `max_steps` is reached. The learning rate decays linearly to 10%.
pub fn pretrain(
    model: &mut DenoiserModel,
    corpus: &[(Tensor, String)],
    heldout: &[(Tensor, String)],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    config.validate()?;
    if corpus.is_empty() || heldout.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus".into()));
    }
    let train = tokenize_all(model, corpus)?;
    let held = tokenize_all(model, heldout)?;
    let held: Vec<NoisedSample> =
        draw_samples(&mut seed::rng(seed::derive(seed, "pretrain-heldout")), model.schedule(), &held);
    let mut rng = seed::rng(seed::derive(seed, "pretrain-steps"));
    let mut adam = Adam::new(model.params(), TrainScope::All, AdamConfig::with_lr(config.lr));
    let uncond = model.unconditional();

    let mut curve = vec![(0, ldm_loss_value(model, &held)?)];
    let mut best = curve[0].1;
    let mut since_best = 0;
    let mut converged_early = false;
    let mut step = 0;
    while step < config.max_steps {
        let frac = step as f64 / config.max_steps as f64;
        adam.set_lr(config.lr * (1.0 - 0.9 * frac));
        let pairs: Vec<(Tensor, TokenSequence)> = (0..config.batch)
            .map(|_| {
                let (x, tokens) = &train[rng.random_range(0..train.len())];
                let tokens = if rng.random_bool(config.cond_dropout) {
                    uncond.clone()
                } else {
                    tokens.clone()
                };
                (x.clone(), tokens)
            })
            .collect();
        let batch = draw_samples(&mut rng, model.schedule(), &pairs);
        let mut g = Graph::new();
        let params = model.bind(&mut g, &TrainScope::All);
        let loss = ldm_loss(&mut g, &*model, &params, &batch)?;
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::TrainingFailure(format!("non-finite loss at pretraining step {step}")));
        }
        let grads = g.backward(loss);
        adam.step(model.params_mut(), &params, &grads);
        step += 1;

        if step % config.eval_every == 0 || step == config.max_steps {
            let l = ldm_loss_value(model, &held)?;
            curve.push((step, l));
            if l < best {
                best = l;
                since_best = 0;
            } else {
                since_best += 1;
            }
            let windows = curve.len() - 1;
            if windows >= config.patience && best >= curve[0].1 {
                return Err(Error::TrainingFailure(format!(
                    "held-out loss did not decrease over {windows} evaluation windows"
                )));
            }
            if since_best >= config.patience {
                converged_early = step < config.max_steps;
                break;
            }
        }
    }
    Ok(PretrainReport {
        steps_run: step,
        curve,
        converged_early,
    })
}
