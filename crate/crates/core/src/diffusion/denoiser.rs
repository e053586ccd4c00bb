//! The trainable noise predictor: a two-resolution U-shaped convolutional
//! network with a cross-attention block on each full-resolution stage, and
//! the text encoder (token table + frozen sinusoidal position codes).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use crate::diffusion::text::{position_codes, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::params::{ParamStore, TrainScope};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_channels: usize,
    pub resolution: usize,
    pub channels: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub max_tokens: usize,
    pub max_personalized: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            resolution: 16,
            channels: 16,
            text_dim: 32,
            time_dim: 32,
            attn_dim: 16,
            max_tokens: 12,
            max_personalized: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_channels", self.image_channels),
            ("channels", self.channels),
            ("text_dim", self.text_dim),
            ("time_dim", self.time_dim),
            ("attn_dim", self.attn_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.resolution < 4 || !self.resolution.is_multiple_of(2) {
            return Err(Error::config("resolution", "must be even and at least 4"));
        }
        if !self.text_dim.is_multiple_of(2) || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("text_dim", "text and time widths must be even"));
        }
        if self.max_tokens < 2 {
            return Err(Error::config("max_tokens", "must be at least 2"));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.image_channels, self.resolution, self.resolution]
    }

    /// Number of cross-attention layers that expose maps.
    pub fn attention_layers(&self) -> usize {
        2
    }

    pub fn spatial(&self) -> usize {
        self.resolution * self.resolution
    }
}

/// Output of one forward pass.
pub struct Prediction {
    pub eps: Var,
    /// One `[n_spatial, s]` post-softmax map per attention layer.
    pub attention: Vec<Var>,
}

/// Anything that predicts noise and exposes cross-attention maps.
pub trait NoisePredictor {
    fn latent_shape(&self) -> [usize; 3];
    fn schedule(&self) -> &NoiseSchedule;
    fn tokenize(&self, prompt: &str) -> Result<TokenSequence>;
    fn unconditional(&self) -> TokenSequence;
    /// Creates graph leaves for the parameters; only `scope` tracks gradients.
    fn bind(&self, g: &mut Graph, scope: &TrainScope) -> Vec<Var>;
    fn predict(
        &self,
        g: &mut Graph,
        params: &[Var],
        z: Var,
        tokens: &TokenSequence,
        t: usize,
    ) -> Prediction;
}

/// Parameter names of the cross-attention projections.
pub fn attention_param_names() -> Vec<String> {
    let mut v = Vec::new();
    for l in 0..2 {
        for p in ["wq", "wk", "wv", "wo"] {
            v.push(format!("attn{l}.{p}"));
        }
    }
    v
}

pub const TOKEN_TABLE: &str = "text.token_embedding";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    arch: ArchConfig,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    params: ParamStore,
    version: usize,
    positions: Vec<f64>,
}

fn init(rng: &mut seed::Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    seed::normal_tensor(rng, shape).map(|x| x * std)
}

impl DenoiserModel {
    pub fn new(arch: ArchConfig, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let schedule = NoiseSchedule::new(schedule)?;
        let vocab = Vocabulary::standard(arch.max_personalized);
        let mut rng = seed::rng(seed);
        let mut ps = ParamStore::new();
        let c = arch.channels;
        let (ic, td, tm, da) = (arch.image_channels, arch.text_dim, arch.time_dim, arch.attn_dim);

        ps.insert(
            TOKEN_TABLE,
            init(&mut rng, vec![vocab.table_size(), td], 1, 0.5),
        );
        ps.insert("time.w1", init(&mut rng, vec![tm, tm], tm, 1.0));
        ps.insert("time.b1", Tensor::zeros(vec![tm]));
        ps.insert("time.w2", init(&mut rng, vec![tm, tm], tm, 1.0));
        ps.insert("time.b2", Tensor::zeros(vec![tm]));
        ps.insert("text.pool.w", init(&mut rng, vec![td, tm], td, 1.0));
        ps.insert("conv_in.w", init(&mut rng, vec![c, ic, 3, 3], ic * 9, 1.0));
        ps.insert("conv_in.b", Tensor::zeros(vec![c]));
        for (name, cin) in [("res_down", c), ("res_mid", c), ("res_up", 2 * c)] {
            ps.insert(&format!("{name}.conv1.w"), init(&mut rng, vec![c, cin, 3, 3], cin * 9, 1.0));
            ps.insert(&format!("{name}.conv1.b"), Tensor::zeros(vec![c]));
            ps.insert(&format!("{name}.time.w"), init(&mut rng, vec![tm, c], tm, 1.0));
            ps.insert(&format!("{name}.time.b"), Tensor::zeros(vec![c]));
            ps.insert(&format!("{name}.conv2.w"), init(&mut rng, vec![c, c, 3, 3], c * 9, 0.5));
            ps.insert(&format!("{name}.conv2.b"), Tensor::zeros(vec![c]));
            if cin != c {
                ps.insert(&format!("{name}.skip.w"), init(&mut rng, vec![c, cin, 1, 1], cin, 1.0));
                ps.insert(&format!("{name}.skip.b"), Tensor::zeros(vec![c]));
            }
        }
        for l in 0..2 {
            ps.insert(&format!("attn{l}.wq"), init(&mut rng, vec![c, da], c, 1.0));
            ps.insert(&format!("attn{l}.wk"), init(&mut rng, vec![td, da], td, 1.0));
            ps.insert(&format!("attn{l}.wv"), init(&mut rng, vec![td, c], td, 1.0));
            ps.insert(&format!("attn{l}.wo"), init(&mut rng, vec![c, c], c, 0.5));
        }
        ps.insert("conv_out.w", init(&mut rng, vec![ic, c, 3, 3], c * 9, 0.5));
        ps.insert("conv_out.b", Tensor::zeros(vec![ic]));

        Ok(Self::from_parts(arch, schedule, vocab, ps, 0))
    }

    pub fn from_parts(
        arch: ArchConfig,
        schedule: NoiseSchedule,
        vocab: Vocabulary,
        params: ParamStore,
        version: usize,
    ) -> Self {
        let positions = position_codes(arch.max_tokens, arch.text_dim);
        Self {
            arch,
            schedule,
            vocab,
            params,
            version,
            positions,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        self.schedule.config()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Task index of the last training run (0 = base model).
    pub fn version(&self) -> usize {
        self.version
    }

    pub fn set_version(&mut self, version: usize) {
        self.version = version;
    }

    pub fn register_personalized(&mut self, token: &str) -> Result<usize> {
        self.vocab.register_personalized(token)
    }

    /// Sets every parameter to zero.
    pub fn zero_weights(&mut self) {
        for i in 0..self.params.len() {
            let shape = self.params.value(i).shape().to_vec();
            self.params.set(i, Tensor::zeros(shape));
        }
    }

    /// Trainable set for personalization: cross-attention projections plus
    /// the embedding rows of the given personalized tokens.
    pub fn personalization_scope(&self, tokens: &[String]) -> TrainScope {
        let rows = tokens
            .iter()
            .filter_map(|t| self.vocab.personalized_id(t))
            .collect();
        TrainScope::Subset {
            tensors: attention_param_names(),
            rows: [(TOKEN_TABLE.to_string(), rows)].into_iter().collect(),
        }
    }

    /// `c = P(p)`: the `s × d` condition embedding of a prompt.
    pub fn encode_text(&self, prompt: &str) -> Result<(TokenSequence, Tensor)> {
        let tokens = self.tokenize(prompt)?;
        let mut g = Graph::new();
        let table = g.constant(self.params.get(TOKEN_TABLE).expect("token table").clone());
        let emb = self.embed(&mut g, table, &tokens);
        Ok((tokens, g.value(emb).clone()))
    }

    fn embed(&self, g: &mut Graph, table: Var, tokens: &TokenSequence) -> Var {
        let d = self.arch.text_dim;
        let rows = g.gather_rows(table, &tokens.ids);
        let pos = Tensor::new(
            vec![tokens.len(), d],
            self.positions[..tokens.len() * d].to_vec(),
        );
        let pos = g.constant(pos);
        g.add(rows, pos)
    }

    fn p(&self, params: &[Var], name: &str) -> Var {
        params[self
            .params
            .index(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    /// Timestep embedding plus a projection of the mean prompt-token
    /// embedding (start token excluded; zero for the empty prompt).
    fn time_embedding(&self, g: &mut Graph, params: &[Var], t: usize, tokens: &TokenSequence) -> Var {
        let dim = self.arch.time_dim;
        let half = dim / 2;
        let mut v = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v[i] = (t as f64 * freq).sin();
            v[half + i] = (t as f64 * freq).cos();
        }
        let x = g.constant(Tensor::new(vec![1, dim], v));
        let w1 = self.p(params, "time.w1");
        let b1 = self.p(params, "time.b1");
        let h = g.matmul(x, w1);
        let h = g.add_row_bias(h, b1);
        let h = g.silu(h);
        let w2 = self.p(params, "time.w2");
        let b2 = self.p(params, "time.b2");
        let h = g.matmul(h, w2);
        let mut h = g.add_row_bias(h, b2);
        if tokens.len() > 1 {
            let rows = g.gather_rows(self.p(params, TOKEN_TABLE), &tokens.ids[1..]);
            let n = tokens.len() - 1;
            let avg = g.constant(Tensor::full(vec![1, n], 1.0 / n as f64));
            let pooled = g.matmul(avg, rows);
            let pooled = g.matmul(pooled, self.p(params, "text.pool.w"));
            h = g.add(h, pooled);
        }
        g.silu(h)
    }

    fn res_block(&self, g: &mut Graph, params: &[Var], name: &str, x: Var, temb: Var) -> Var {
        let c = self.arch.channels;
        let h = g.silu(x);
        let h = g.conv2d(
            h,
            self.p(params, &format!("{name}.conv1.w")),
            self.p(params, &format!("{name}.conv1.b")),
        );
        let tp = g.matmul(temb, self.p(params, &format!("{name}.time.w")));
        let tp = g.add_row_bias(tp, self.p(params, &format!("{name}.time.b")));
        let tp = g.reshape(tp, vec![c]);
        let h = g.add_channel_bias(h, tp);
        let h = g.silu(h);
        let h = g.conv2d(
            h,
            self.p(params, &format!("{name}.conv2.w")),
            self.p(params, &format!("{name}.conv2.b")),
        );
        let skip = if self.params.index(&format!("{name}.skip.w")).is_some() {
            g.conv2d(
                x,
                self.p(params, &format!("{name}.skip.w")),
                self.p(params, &format!("{name}.skip.b")),
            )
        } else {
            x
        };
        g.add(skip, h)
    }

    /// Returns the updated feature map and the `[HW, s]` attention map.
    fn cross_attention(
        &self,
        g: &mut Graph,
        params: &[Var],
        layer: usize,
        x: Var,
        cond: Var,
    ) -> (Var, Var) {
        let c = self.arch.channels;
        let r = self.arch.resolution;
        let hw = r * r;
        let flat = g.reshape(x, vec![c, hw]);
        let xt = g.transpose(flat);
        let q = g.matmul(xt, self.p(params, &format!("attn{layer}.wq")));
        let k = g.matmul(cond, self.p(params, &format!("attn{layer}.wk")));
        let v = g.matmul(cond, self.p(params, &format!("attn{layer}.wv")));
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let logits = g.scale(logits, 1.0 / (self.arch.attn_dim as f64).sqrt());
        let attn = g.softmax_rows(logits);
        let o = g.matmul(attn, v);
        let o = g.matmul(o, self.p(params, &format!("attn{layer}.wo")));
        let o = g.transpose(o);
        let o = g.reshape(o, vec![c, r, r]);
        (g.add(x, o), attn)
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_shape(&self) -> [usize; 3] {
        self.arch.latent_shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(prompt, self.arch.max_tokens)
    }

    fn unconditional(&self) -> TokenSequence {
        self.vocab.unconditional()
    }

    fn bind(&self, g: &mut Graph, scope: &TrainScope) -> Vec<Var> {
        self.params.bind(g, scope)
    }

    fn predict(
        &self,
        g: &mut Graph,
        params: &[Var],
        z: Var,
        tokens: &TokenSequence,
        t: usize,
    ) -> Prediction {
        let cond = self.embed(g, self.p(params, TOKEN_TABLE), tokens);
        let temb = self.time_embedding(g, params, t, tokens);
        let h0 = g.conv2d(z, self.p(params, "conv_in.w"), self.p(params, "conv_in.b"));
        let h1 = self.res_block(g, params, "res_down", h0, temb);
        let (h1, a0) = self.cross_attention(g, params, 0, h1, cond);
        let d = g.avg_pool2(h1);
        let m = self.res_block(g, params, "res_mid", d, temb);
        let u = g.upsample2(m);
        let cat = g.concat0(u, h1);
        let h2 = self.res_block(g, params, "res_up", cat, temb);
        let (h2, a1) = self.cross_attention(g, params, 1, h2, cond);
        let h = g.silu(h2);
        let eps = g.conv2d(h, self.p(params, "conv_out.w"), self.p(params, "conv_out.b"));
        Prediction {
            eps,
            attention: vec![a0, a1],
        }
    }
}

/// Captured attention maps for one forward pass: per layer, `[n_spatial, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub timestep: usize,
    pub maps: Vec<Tensor>,
}

impl AttentionStack {
    pub fn layers(&self) -> usize {
        self.maps.len()
    }
}

/// Noise prediction without gradient tracking; optionally returns the
/// captured attention maps.
pub fn predict_noise<M: NoisePredictor + ?Sized>(
    model: &M,
    z_t: &Tensor,
    tokens: &TokenSequence,
    t: usize,
    capture_attention: bool,
) -> Result<(Tensor, Option<AttentionStack>)> {
    if t == 0 || t > model.schedule().steps() {
        return Err(Error::Range(format!(
            "timestep {t} outside [1, {}]",
            model.schedule().steps()
        )));
    }
    if z_t.shape() != model.latent_shape() {
        return Err(Error::Dimension(format!(
            "latent shape {:?} != model shape {:?}",
            z_t.shape(),
            model.latent_shape()
        )));
    }
    let mut g = Graph::new();
    let params = model.bind(&mut g, &TrainScope::Frozen);
    let z = g.constant(z_t.clone());
    let pred = model.predict(&mut g, &params, z, tokens, t);
    let stack = capture_attention.then(|| AttentionStack {
        timestep: t,
        maps: pred.attention.iter().map(|&a| g.value(a).clone()).collect(),
    });
    Ok((g.value(pred.eps).clone(), stack))
}
