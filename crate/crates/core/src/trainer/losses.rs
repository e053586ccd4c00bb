use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::{ldm_loss, predict_noise, DenoiserModel, NoisePredictor, NoisedSample};
use crate::error::{Error, Result};
use crate::params::TrainScope;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Prior-preservation weight of the first-task objective.
    pub lambda: f64,
    /// Rehearsal weight.
    pub alpha: f64,
    /// Weight of the summed per-task prior terms.
    pub beta_tame: f64,
    /// Distillation weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            beta_tame: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("weights.lambda", self.lambda),
            ("weights.alpha", self.alpha),
            ("weights.beta_tame", self.beta_tame),
            ("weights.gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Frozen copy of the model before the current task. There is no way to
/// obtain mutable access to the wrapped model.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: DenoiserModel,
}

impl TeacherSnapshot {
    pub fn of(model: &DenoiserModel) -> Self {
        Self {
            model: model.clone(),
        }
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    /// Noise predictions for each sample, computed without gradients.
    pub fn predict(&self, samples: &[NoisedSample]) -> Result<Vec<Tensor>> {
        samples
            .iter()
            .map(|s| {
                let zt = s.noised(self.model.schedule())?;
                Ok(predict_noise(&self.model, &zt, &s.tokens, s.t, false)?.0)
            })
            .collect()
    }
}

/// Which terms the combined objective includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_tame: bool,
    pub use_ecd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_tame: true,
            use_ecd: true,
        }
    }
}

/// Noised samples for one optimizer step of task `k`.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub task: Vec<NoisedSample>,
    /// One prior batch per learned task `1..=k`; the last is task `k`'s.
    pub priors: Vec<Vec<NoisedSample>>,
    /// Rehearsal samples from the short-term bank, grouped by earlier task.
    pub rehearsal: Vec<Vec<NoisedSample>>,
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn accumulate(g: &mut Graph, acc: Option<Var>, x: Var) -> Option<Var> {
    Some(match acc {
        None => x,
        Some(a) => g.add(a, x),
    })
}

/// `ldm(task) + lambda * ldm(prior)`.
pub fn pdm_loss<M: NoisePredictor + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    task: &[NoisedSample],
    prior: &[NoisedSample],
    lambda: f64,
) -> Result<Var> {
    let l = ldm_loss(g, model, params, task)?;
    if lambda == 0.0 {
        return Ok(l);
    }
    if prior.is_empty() {
        return Err(Error::MissingPrior);
    }
    let p = ldm_loss(g, model, params, prior)?;
    let p = g.scale(p, lambda);
    Ok(g.add(l, p))
}

/// Rehearsal-plus-prior term for task `k`:
/// `alpha * sum_l ldm(rehearsal_l) + beta_tame * sum_l ldm(prior_l)`.
/// Zero for `k = 1`. Empty rehearsal groups contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn tame_loss<M: NoisePredictor + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    k: usize,
    rehearsal: &[Vec<NoisedSample>],
    priors: &[Vec<NoisedSample>],
    alpha: f64,
    beta_tame: f64,
) -> Result<Var> {
    if k <= 1 {
        return Ok(zero(g));
    }
    let mut acc = None;
    if alpha != 0.0 {
        if rehearsal.iter().all(Vec::is_empty) {
            log::warn!("task {k}: short-term memory is empty, rehearsal term contributes 0");
        }
        for group in rehearsal.iter().filter(|r| !r.is_empty()) {
            let l = ldm_loss(g, model, params, group)?;
            let l = g.scale(l, alpha);
            acc = accumulate(g, acc, l);
        }
    }
    if beta_tame != 0.0 {
        if priors.iter().all(Vec::is_empty) {
            return Err(Error::MissingPrior);
        }
        for group in priors.iter().filter(|p| !p.is_empty()) {
            let l = ldm_loss(g, model, params, group)?;
            let l = g.scale(l, beta_tame);
            acc = accumulate(g, acc, l);
        }
    }
    Ok(acc.unwrap_or_else(|| zero(g)))
}

/// `gamma * sum_l mean ||teacher(z_t) - student(z_t)||^2` over rehearsal
/// groups. The teacher enters as constants.
pub fn ecd_loss<M: NoisePredictor + ?Sized>(
    g: &mut Graph,
    student: &M,
    params: &[Var],
    teacher: Option<&TeacherSnapshot>,
    k: usize,
    rehearsal: &[Vec<NoisedSample>],
    gamma: f64,
) -> Result<Var> {
    if k <= 1 {
        return Ok(zero(g));
    }
    let teacher = teacher.ok_or(Error::MissingTeacher(k))?;
    let mut acc = None;
    for group in rehearsal.iter().filter(|r| !r.is_empty()) {
        let targets = teacher.predict(group)?;
        let mut sum = None;
        for (s, target) in group.iter().zip(targets) {
            let zt = g.constant(s.noised(student.schedule())?);
            let pred = student.predict(g, params, zt, &s.tokens, s.t);
            let target = g.constant(target);
            let l = g.mse(pred.eps, target);
            sum = accumulate(g, sum, l);
        }
        let mean = g.scale(sum.expect("non-empty group"), gamma / group.len() as f64);
        acc = accumulate(g, acc, mean);
    }
    Ok(acc.unwrap_or_else(|| zero(g)))
}

/// Graph nodes of each term of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub tame: Var,
    pub ecd: Var,
    pub total: Var,
}

/// The training objective for task `k`.
///
/// * `k = 1`: `ldm(task) + lambda * ldm(prior_1)`.
/// * `k > 1`: `ldm(task) + tame + ecd`; with TAME disabled the prior term
///   falls back to `lambda * ldm(prior_k)` (plain fine-tuning).
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<M: NoisePredictor + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    teacher: Option<&TeacherSnapshot>,
    k: usize,
    batch: &StepBatch,
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<LossTerms> {
    let task = ldm_loss(g, model, params, &batch.task)?;
    let tame = if k > 1 && ablation.use_tame {
        tame_loss(g, model, params, k, &batch.rehearsal, &batch.priors, weights.alpha, weights.beta_tame)?
    } else if weights.lambda == 0.0 {
        zero(g)
    } else {
        let current = batch.priors.last().filter(|p| !p.is_empty()).ok_or(Error::MissingPrior)?;
        let p = ldm_loss(g, model, params, current)?;
        g.scale(p, weights.lambda)
    };
    let ecd = if k > 1 && ablation.use_ecd {
        ecd_loss(g, model, params, teacher, k, &batch.rehearsal, weights.gamma)?
    } else {
        zero(g)
    };
    let total = g.add(task, tame);
    let total = g.add(total, ecd);
    Ok(LossTerms {
        task,
        tame,
        ecd,
        total,
    })
}

/// Scalar values of the objective's terms with the model frozen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub task: f64,
    pub tame: f64,
    pub ecd: f64,
    pub total: f64,
}

pub fn combined_loss_values<M: NoisePredictor + ?Sized>(
    model: &M,
    teacher: Option<&TeacherSnapshot>,
    k: usize,
    batch: &StepBatch,
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, &TrainScope::Frozen);
    let t = combined_loss(&mut g, model, &params, teacher, k, batch, weights, ablation)?;
    Ok(LossValues {
        task: g.scalar_value(t.task),
        tame: g.scalar_value(t.tame),
        ecd: g.scalar_value(t.ecd),
        total: g.scalar_value(t.total),
    })
}
