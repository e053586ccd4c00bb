use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::sampler::{ddpm_step, guided_eps, timestep_pairs};
use crate::diffusion::{NoisePredictor, SamplerConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::guidance::losses::{
    clul_loss, dal_loss, extract_mask, gaussian_kernel3, oaa_loss, smoothed_map, RegionMasks,
};
use crate::params::TrainScope;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub use_caa: bool,
    pub use_oaa: bool,
    /// Latent refinement iterations per guided timestep.
    pub iterations: usize,
    /// Initial step size; decays linearly over the sampling steps.
    pub step_size: f64,
    /// Leading fraction of sampling steps on which guidance runs.
    pub guided_fraction: f64,
    /// Width of the 3×3 Gaussian smoother.
    pub sigma: f64,
    /// Activation threshold as a fraction of the smoothed map's maximum.
    pub threshold: f64,
    /// Attention layers the losses read.
    pub layers: Vec<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            use_caa: true,
            use_oaa: true,
            iterations: 1,
            step_size: 20.0,
            guided_fraction: 0.8,
            sigma: 0.5,
            threshold: 0.5,
            layers: vec![0, 1],
        }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            use_caa: false,
            use_oaa: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::config("guidance.step_size", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return Err(Error::config("guidance.guided_fraction", "must be in [0, 1]"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("guidance.sigma", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("guidance.threshold", "must be in [0, 1]"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("guidance.layers", "at least one layer required"));
        }
        Ok(())
    }

    fn active(&self) -> bool {
        (self.use_caa || self.use_oaa) && self.iterations > 0 && self.step_size > 0.0
    }
}

/// Loss values at one timestep, with each personalized token's smoothed
/// maximum attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub timestep: usize,
    pub clul: f64,
    pub dal: f64,
    pub oaa: f64,
    pub token_max: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuidanceLossReport {
    /// Personalized tokens, in prompt order.
    pub tokens: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl GuidanceLossReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("timestep,clul,dal,oaa");
        for t in &self.tokens {
            let _ = write!(s, ",max_{t}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.timestep, r.clul, r.dal, r.oaa);
            for m in &r.token_max {
                let _ = write!(s, ",{m}");
            }
            s.push('\n');
        }
        s
    }

    /// Per timestep, the smallest personalized-token maximum; averaged.
    pub fn mean_min_token_max(&self) -> Option<f64> {
        let mins: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.token_max.iter().copied().reduce(f64::min))
            .collect();
        (!mins.is_empty()).then(|| mins.iter().sum::<f64>() / mins.len() as f64)
    }
}

/// Token roles read from a prompt.
#[derive(Clone, Debug)]
struct Targets {
    concepts: Vec<usize>,
    personalized: Vec<usize>,
    pairing: Vec<(usize, usize)>,
}

impl Targets {
    fn of(tokens: &TokenSequence) -> Self {
        Self {
            concepts: tokens.concept_indices.clone(),
            personalized: tokens.personalized_indices.clone(),
            pairing: tokens
                .personalized_indices
                .iter()
                .filter(|&&p| tokens.concept_indices.contains(&(p + 1)))
                .map(|&p| (p, p + 1))
                .collect(),
        }
    }
}

/// Loss values and (when requested) the gradient with respect to `z`.
pub struct GuidanceEval {
    pub clul: f64,
    pub dal: f64,
    pub oaa: f64,
    pub token_max: Vec<f64>,
    /// Gradient of the enabled losses' sum; `None` when no loss is enabled.
    pub grad: Option<Tensor>,
}

impl GuidanceEval {
    pub fn total(&self, config: &GuidanceConfig) -> f64 {
        let mut t = 0.0;
        if config.use_caa {
            t += self.clul + self.dal;
        }
        if config.use_oaa {
            t += self.oaa;
        }
        t
    }
}

/// Evaluates the guidance losses on the conditional attention maps at
/// `(z, t)`. Activation masks are read from the same forward pass and held
/// constant.
pub fn evaluate_guidance<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &Tensor,
    tokens: &TokenSequence,
    t: usize,
    config: &GuidanceConfig,
    with_grad: bool,
) -> Result<GuidanceEval> {
    let [_, h, w] = model.latent_shape();
    let targets = Targets::of(tokens);
    if config.use_caa && targets.personalized.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if config.use_oaa {
        tokens.pairing()?;
    }
    let kernel = gaussian_kernel3(config.sigma);
    let mut g = Graph::new();
    let params = model.bind(&mut g, &TrainScope::Frozen);
    let zv = g.leaf(z.clone(), with_grad);
    let pred = model.predict(&mut g, &params, zv, tokens, t);
    let maps: Vec<Var> = config
        .layers
        .iter()
        .map(|&l| {
            pred.attention
                .get(l)
                .copied()
                .ok_or_else(|| Error::config("guidance.layers", format!("layer {l} does not exist")))
        })
        .collect::<Result<_>>()?;

    let regions = RegionMasks::stripes(targets.concepts.len(), h, w)?;
    let clul = clul_loss(&mut g, &maps, &targets.concepts, &regions)?;
    let mut token_max = Vec::new();
    for &j in &targets.personalized {
        let sm = smoothed_map(&mut g, &maps, j, h, w, kernel);
        token_max.push(g.value(sm).max());
    }
    let dal = if targets.personalized.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        dal_loss(&mut g, &maps, &targets.personalized, h, w, kernel)?
    };
    let masks: Vec<Vec<Vec<f64>>> = maps
        .iter()
        .map(|&m| {
            targets
                .concepts
                .iter()
                .map(|&i| {
                    let col = g.value(m).column(i);
                    let smoothed = crate::autograd::blur3(&col, h, w, &kernel);
                    extract_mask(&smoothed, config.threshold)
                })
                .collect()
        })
        .collect();
    let paired: Vec<usize> = targets.pairing.iter().map(|&(p, _)| p).collect();
    let oaa = oaa_loss(&mut g, &maps, &targets.concepts, &paired, &masks, &targets.pairing)?;

    let mut enabled = Vec::new();
    if config.use_caa {
        enabled.push(clul);
        enabled.push(dal);
    }
    if config.use_oaa {
        enabled.push(oaa);
    }
    let grad = match (with_grad, enabled.into_iter().reduce(|a, b| g.add(a, b))) {
        (true, Some(total)) => Some(g.backward(total).get(zv)),
        _ => None,
    };
    Ok(GuidanceEval {
        clul: g.scalar_value(clul),
        dal: g.scalar_value(dal),
        oaa: g.scalar_value(oaa),
        token_max,
        grad,
    })
}

/// `z - step * grad(total guidance loss)` for one refinement iteration.
pub fn refine_latent<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &Tensor,
    tokens: &TokenSequence,
    t: usize,
    config: &GuidanceConfig,
    step: f64,
) -> Result<(Tensor, GuidanceEval)> {
    let eval = evaluate_guidance(model, z, tokens, t, config, true)?;
    let z = match &eval.grad {
        Some(gz) => z.zip_map(gz, |z, g| z - step * g),
        None => z.clone(),
    };
    Ok((z, eval))
}

/// Sampling with attention guidance. Each guided timestep refines `z_t`
/// before the noise prediction; every timestep's losses are reported. With
/// guidance inactive this follows [`crate::diffusion::sample_tokens`]
/// exactly.
pub fn guided_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    prompt: &str,
    config: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Tensor, GuidanceLossReport)> {
    config.validate()?;
    sampler.validate(model.schedule())?;
    let tokens = model.tokenize(prompt)?;
    let uncond = model.unconditional();
    let report_tokens = tokens
        .personalized_indices
        .iter()
        .map(|&p| prompt.split_whitespace().nth(p - 1).unwrap_or("").to_string())
        .collect();
    let mut report = GuidanceLossReport {
        tokens: report_tokens,
        rows: Vec::new(),
    };
    // The report still reads every map when guidance is off.
    let observe = GuidanceConfig {
        use_caa: false,
        use_oaa: false,
        ..config.clone()
    };
    let mut rng = seed::rng(seed);
    let mut z = seed::normal_tensor(&mut rng, model.latent_shape().to_vec());
    let pairs = timestep_pairs(model.schedule(), sampler.steps)?;
    let guided_steps = (config.guided_fraction * pairs.len() as f64).round() as usize;
    for (i, &(t, t_prev)) in pairs.iter().enumerate() {
        let eval = if config.active() && i < guided_steps {
            let step = config.step_size * (1.0 - i as f64 / pairs.len() as f64);
            let mut first = None;
            for _ in 0..config.iterations {
                let (next, eval) = refine_latent(model, &z, &tokens, t, config, step)?;
                z = next;
                first.get_or_insert(eval);
            }
            first.expect("at least one iteration")
        } else {
            evaluate_guidance(model, &z, &tokens, t, &observe, false)?
        };
        report.rows.push(ReportRow {
            timestep: t,
            clul: eval.clul,
            dal: eval.dal,
            oaa: eval.oaa,
            token_max: eval.token_max,
        });
        let eps = guided_eps(model, &z, &tokens, &uncond, t, sampler.guidance_scale)?;
        z = ddpm_step(model.schedule(), &z, &eps, t, t_prev, &mut rng);
    }
    Ok((z, report))
}
