use crate::autograd::Tensor;
use crate::diffusion::{sample, NoisePredictor, SamplerConfig};
use crate::error::{Error, Result};
use crate::memory::bank::{BankConfig, LongTermBank, ShortTermBank, ShortTermEntry};
use crate::metrics::extractor::dot;
use crate::metrics::FeatureExtractor;
use crate::seed;

/// Selection score of a candidate feature:
/// `mean_b (1 - cos(f, g_b)) + beta * cos(f, stored)` where `g_b` runs over
/// every generated feature of the other tasks. With no other task the
/// first term is 0.
pub fn score(
    candidate: &[f64],
    stored: &[f64],
    other_tasks: &[Vec<Vec<f64>>],
    beta_score: f64,
) -> Result<f64> {
    let d = candidate.len();
    if stored.len() != d || other_tasks.iter().flatten().any(|f| f.len() != d) {
        return Err(Error::Dimension("score features differ in dimension".into()));
    }
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for f in other_tasks.iter().flatten() {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
        n += 1;
    }
    let diversity = if n == 0 {
        0.0
    } else {
        1.0 - dot(candidate, &mean) / n as f64
    };
    Ok(diversity + beta_score * dot(candidate, stored))
}

/// Winner per long-term entry from precomputed candidate features.
/// `candidates[i][a]` is the feature of candidate `a` for entry `i`. The
/// diversity pool of entry `i` holds every candidate of every entry whose
/// task differs from entry `i`'s. Ties keep the lowest index.
pub fn select_from_features(
    long: &LongTermBank,
    candidates: &[Vec<Vec<f64>>],
    beta_score: f64,
) -> Result<Vec<(usize, f64)>> {
    if candidates.len() != long.len() {
        return Err(Error::Dimension(format!(
            "{} candidate groups for {} long-term entries",
            candidates.len(),
            long.len()
        )));
    }
    let tasks = long.tasks();
    let mut out = Vec::with_capacity(long.len());
    for (i, entry) in long.entries().iter().enumerate() {
        let others: Vec<Vec<Vec<f64>>> = tasks
            .iter()
            .filter(|&&t| t != entry.task)
            .map(|&t| {
                long.entries()
                    .iter()
                    .zip(candidates)
                    .filter(|(e, _)| e.task == t)
                    .flat_map(|(_, c)| c.iter().cloned())
                    .collect()
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (a, f) in candidates[i].iter().enumerate() {
            let s = score(f, &entry.feature, &others, beta_score)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((a, s));
            }
        }
        out.push(best.ok_or_else(|| Error::EmptyInput(format!("no candidates for entry {i}")))?);
    }
    Ok(out)
}

/// Generates `eta` images per long-term prompt with the current model.
pub fn generate_candidates<M: NoisePredictor + ?Sized>(
    model: &M,
    long: &LongTermBank,
    eta: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    long.entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (0..eta)
                .map(|a| {
                    let s = seed::derive_indexed(seed, &format!("memory-candidate-{i}"), a as u64);
                    sample(model, &e.prompt, sampler, s)
                })
                .collect()
        })
        .collect()
}

/// Builds the short-term bank: generate, score, keep the best candidate
/// per long-term entry. An empty long-term bank gives an empty bank.
pub fn select_short_term<M: NoisePredictor + ?Sized>(
    model: &M,
    long: &LongTermBank,
    ext: &FeatureExtractor,
    config: &BankConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ShortTermBank> {
    config.validate()?;
    if long.is_empty() {
        return Ok(ShortTermBank::default());
    }
    let images = generate_candidates(model, long, config.eta, sampler, seed)?;
    let feats: Vec<Vec<Vec<f64>>> = images
        .iter()
        .map(|c| ext.encode_images(&c.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let winners = select_from_features(long, &feats, config.beta_score)?;
    let entries = winners
        .into_iter()
        .zip(images)
        .zip(long.entries())
        .map(|(((a, s), mut imgs), e)| ShortTermEntry {
            image: imgs.swap_remove(a),
            prompt: e.prompt.clone(),
            task: e.task,
            score: s,
            candidate: a,
        })
        .collect();
    Ok(ShortTermBank { entries })
}
