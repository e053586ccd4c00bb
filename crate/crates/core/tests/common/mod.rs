#![allow(dead_code)]

use std::path::Path;

use lifelong_diffusion::autograd::{Graph, Tensor, Var};
use lifelong_diffusion::data::ConceptSpec;
use lifelong_diffusion::diffusion::{
    ArchConfig, DenoiserModel, NoisePredictor, NoiseSchedule, Prediction, ScheduleConfig,
    TokenSequence, Vocabulary,
};
use lifelong_diffusion::experiment::ExperimentConfig;
use lifelong_diffusion::params::TrainScope;
use lifelong_diffusion::Result;
use lifelong_diffusion::seed::{self, Rng as SeedRng};
use rand::Rng;

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        resolution: 8,
        channels: 4,
        text_dim: 8,
        time_dim: 8,
        attn_dim: 4,
        max_personalized: 4,
        ..ArchConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> DenoiserModel {
    DenoiserModel::new(tiny_arch(), ScheduleConfig::default(), seed).unwrap()
}

pub fn concept(id: usize, noun: &str, hue: f64) -> ConceptSpec {
    ConceptSpec {
        id,
        token: format!("V{}", id + 1),
        class_noun: noun.to_string(),
        hue,
        texture_seed: id as u64,
        scale: 1.0,
    }
}

/// A fast end-to-end configuration on 8×8 images.
pub fn tiny_experiment(out: &Path, tasks: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 21,
        out: out.to_path_buf(),
        arch: tiny_arch(),
        ..ExperimentConfig::default()
    };
    cfg.pretrain.corpus_size = 200;
    cfg.pretrain.heldout_size = 16;
    cfg.pretrain.max_steps = 60;
    cfg.pretrain.eval_every = 20;
    cfg.extractor.corpus_size = 300;
    cfg.extractor.heldout_size = 50;
    cfg.extractor.steps = 40;
    cfg.extractor.hidden = 16;
    cfg.extractor.batch = 16;
    cfg.images_per_task = 3;
    cfg.train.steps = 12;
    cfg.train.prior_size = 4;
    cfg.train.prior_keep = 2;
    cfg.train.bank.eta = 2;
    cfg.train.sampler.steps = 8;
    cfg.eval.prompts = 2;
    cfg.eval.samples_per_prompt = 1;
    cfg.eval.sampler.steps = 8;
    cfg.concepts = [(0, "dog", 200.0), (1, "duck", 45.0), (2, "cat", 300.0)]
        .into_iter()
        .take(tasks)
        .map(|(i, n, h)| concept(i, n, h))
        .collect();
    cfg
}

pub fn rng(s: u64) -> SeedRng {
    seed::rng(s)
}

pub fn uniform(rng: &mut SeedRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn unit(rng: &mut SeedRng, d: usize) -> Vec<f64> {
    let v = uniform(rng, d, -1.0, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random orthogonal matrix (rows) by Gram-Schmidt.
pub fn orthogonal(rng: &mut SeedRng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < d {
        let mut v = uniform(rng, d, -1.0, 1.0);
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

pub fn rotate(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    q.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Central-difference derivative.
pub fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A 1×4×4 "denoiser" whose cross-attention maps are affine in the latent:
/// `A_l[p, j] = base[p, j] + 0.05 * z[p] * w_l[j]`. Noise prediction is
/// `0.1 z`. It has no parameters.
pub struct CraftedDenoiser {
    vocab: Vocabulary,
    schedule: NoiseSchedule,
}

impl CraftedDenoiser {
    pub fn new() -> Self {
        let mut vocab = Vocabulary::standard(4);
        vocab.register_personalized("V1").unwrap();
        vocab.register_personalized("V2").unwrap();
        Self {
            vocab,
            schedule: NoiseSchedule::new(ScheduleConfig::default()).unwrap(),
        }
    }

    fn base(s: usize) -> Tensor {
        let mut data = Vec::with_capacity(16 * s);
        for p in 0..16 {
            for j in 0..s {
                let v = ((p as f64) * 1.3 + (j as f64) * 0.7).sin();
                data.push(0.05 + 0.25 * v * v);
            }
        }
        Tensor::new(vec![16, s], data)
    }

    fn weights(layer: usize, s: usize) -> Tensor {
        Tensor::new(
            vec![1, s],
            (0..s).map(|j| ((j as f64) * 0.9 + layer as f64).cos()).collect(),
        )
    }
}

impl NoisePredictor for CraftedDenoiser {
    fn latent_shape(&self) -> [usize; 3] {
        [1, 4, 4]
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(prompt, 12)
    }

    fn unconditional(&self) -> TokenSequence {
        self.vocab.unconditional()
    }

    fn bind(&self, _g: &mut Graph, _scope: &TrainScope) -> Vec<Var> {
        Vec::new()
    }

    fn predict(&self, g: &mut Graph, _params: &[Var], z: Var, tokens: &TokenSequence, _t: usize) -> Prediction {
        let s = tokens.len();
        let zcol = g.reshape(z, vec![16, 1]);
        let attention = (0..2)
            .map(|l| {
                let w = g.constant(Self::weights(l, s));
                let zw = g.matmul(zcol, w);
                let zw = g.scale(zw, 0.05);
                let base = g.constant(Self::base(s));
                g.add(base, zw)
            })
            .collect();
        Prediction {
            eps: g.scale(z, 0.1),
            attention,
        }
    }
}
