use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{PromptTemplate, TaskDataset};
use crate::diffusion::{sample, DenoiserModel, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::alignment::{image_alignment_features, text_alignment_features, AlignmentMatrix};
use crate::metrics::extractor::FeatureExtractor;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Images generated per concept and per prompt.
    pub samples_per_prompt: usize,
    /// How many templates (from the start of the list) to evaluate.
    pub prompts: usize,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 4,
            prompts: 20,
            sampler: SamplerConfig::desk(),
        }
    }
}

/// IA and TA of one concept under one model.
pub fn evaluate_cell(
    model: &DenoiserModel,
    task: &TaskDataset,
    templates: &[PromptTemplate],
    ext: &FeatureExtractor,
    config: &EvalConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if config.samples_per_prompt == 0 || config.prompts == 0 {
        return Err(Error::config("eval", "samples_per_prompt and prompts must be positive"));
    }
    let reference: Vec<&Tensor> = task.images();
    let ref_feats = ext.encode_images(&reference)?;
    let phrase = task.concept.phrase();
    let (mut ia, mut ta, mut n) = (0.0, 0.0, 0.0);
    for tpl in templates.iter().take(config.prompts) {
        let prompt = tpl.fill(&phrase);
        let images: Vec<Tensor> = (0..config.samples_per_prompt)
            .map(|i| {
                let s = seed::derive_indexed(
                    seed,
                    &format!("eval-task-{}-prompt-{}", task.task, tpl.id),
                    i as u64,
                );
                sample(model, &prompt, &config.sampler, s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = images.iter().collect();
        let feats = ext.encode_images(&refs)?;
        ia += image_alignment_features(&feats, &ref_feats)?;
        ta += text_alignment_features(&feats, &ext.encode_text(&prompt)?)?;
        n += 1.0;
    }
    Ok((ia / n, ta / n))
}

/// Fills `IA[k][l]`, `TA[k][l]` for every `l <= k`. `models[k-1]` is the
/// model after task `k`; `tasks[l-1]` holds the reference images of task
/// `l`. Seeds depend on the evaluated task and prompt only, so every row
/// measures the same noise draws.
pub fn evaluate_sequence(
    models: &[DenoiserModel],
    tasks: &[TaskDataset],
    templates: &[PromptTemplate],
    ext: &FeatureExtractor,
    config: &EvalConfig,
    seed: u64,
) -> Result<AlignmentMatrix> {
    if models.len() > tasks.len() {
        return Err(Error::Dimension(format!(
            "{} models but only {} task datasets",
            models.len(),
            tasks.len()
        )));
    }
    let mut m = AlignmentMatrix::new();
    for (ki, model) in models.iter().enumerate() {
        for task in &tasks[..=ki] {
            let (ia, ta) = evaluate_cell(model, task, templates, ext, config, seed)?;
            m.set(ki + 1, task.task, ia, ta)?;
        }
    }
    Ok(m)
}
