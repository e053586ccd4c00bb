//! A small dual encoder fit once, contrastively, on the synthetic domain and
//! then frozen. Images and prompts map to unit vectors in a shared space.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::autograd::{Graph, Tensor, Var};
use crate::blob::{self, DType};
use crate::diffusion::text::{Vocabulary, START_TOKEN};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore, TrainScope};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Image/prompt pairs rendered for the fit.
    pub corpus_size: usize,
    /// Held-out pairs rendered for the retrieval check.
    pub heldout_size: usize,
    pub hidden: usize,
    pub dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            corpus_size: 8000,
            heldout_size: 500,
            hidden: 96,
            dim: 32,
            steps: 3000,
            batch: 64,
            lr: 3e-3,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    words: Vec<String>,
    image_len: usize,
    params: ParamStore,
    /// Where the parameters came from, e.g. `"fit:seed=7,n=2000"`.
    pub provenance: String,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const TEXT: usize = 4;

impl FeatureExtractor {
    fn init(words: Vec<String>, image_len: usize, cfg: &ExtractorConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut params = ParamStore::new();
        let mut draw = |shape: Vec<usize>, fan_in: usize| {
            seed::normal_tensor(&mut rng, shape).map(|x| x / (fan_in as f64).sqrt())
        };
        let w1 = draw(vec![image_len, cfg.hidden], image_len);
        let w2 = draw(vec![cfg.hidden, cfg.dim], cfg.hidden);
        let text = draw(vec![words.len(), cfg.dim], 1);
        params.insert("image.w1", w1);
        params.insert("image.b1", Tensor::zeros(vec![cfg.hidden]));
        params.insert("image.w2", w2);
        params.insert("image.b2", Tensor::zeros(vec![cfg.dim]));
        params.insert("text.embedding", text);
        Self {
            words,
            image_len,
            params,
            provenance: String::new(),
        }
    }

    /// Rebuilds an extractor from stored parameters.
    pub fn from_parts(words: Vec<String>, params: ParamStore, provenance: String) -> Result<Self> {
        let names = ["image.w1", "image.b1", "image.w2", "image.b2", "text.embedding"];
        if params.names() != names {
            return Err(Error::integrity("extractor", "unexpected parameter set"));
        }
        let image_len = params.value(W1).shape()[0];
        if params.value(TEXT).shape()[0] != words.len() {
            return Err(Error::integrity("extractor", "word list does not match embedding"));
        }
        Ok(Self {
            words,
            image_len,
            params,
            provenance,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.value(B2).len()
    }

    /// Normalized bag-of-words weights. The start token and words outside
    /// the base vocabulary that look like personalized tokens are skipped.
    fn bag(&self, prompt: &str) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.words.len()];
        let mut unknown = Vec::new();
        let mut n = 0.0;
        for w in prompt.split_whitespace() {
            if w == START_TOKEN {
                continue;
            }
            match self.words.iter().position(|x| x == w) {
                Some(i) => {
                    counts[i] += 1.0;
                    n += 1.0;
                }
                None if is_personalized_token(w) => {}
                None => unknown.push(w.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownToken(unknown));
        }
        if n == 0.0 {
            return Err(Error::EmptyPrompt);
        }
        Ok(counts.into_iter().map(|c| c / n).collect())
    }

    fn image_rows(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.image_len);
        for img in images {
            if img.len() != self.image_len {
                return Err(Error::Dimension(format!(
                    "image has {} values, extractor expects {}",
                    img.len(),
                    self.image_len
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::new(vec![images.len(), self.image_len], data))
    }

    fn image_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let h = g.matmul(x, p[W1]);
        let h = g.add_row_bias(h, p[B1]);
        let h = g.silu(h);
        let h = g.matmul(h, p[W2]);
        let h = g.add_row_bias(h, p[B2]);
        g.normalize_rows(h)
    }

    fn text_graph(&self, g: &mut Graph, p: &[Var], bags: Var) -> Var {
        let h = g.matmul(bags, p[TEXT]);
        g.normalize_rows(h)
    }

    /// Unit-norm image features, one row per image.
    pub fn encode_images(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, &TrainScope::Frozen);
        let x = g.constant(self.image_rows(images)?);
        let f = self.image_graph(&mut g, &p, x);
        Ok(rows(g.value(f)))
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[image])?.remove(0))
    }

    /// Unit-norm text feature of a prompt.
    pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let bag = self.bag(prompt)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, &TrainScope::Frozen);
        let b = g.constant(Tensor::new(vec![1, bag.len()], bag));
        let f = self.text_graph(&mut g, &p, b);
        Ok(rows(g.value(f)).remove(0))
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractorManifest {
    provenance: String,
    words: Vec<String>,
    params: Vec<String>,
}

const EXTRACTOR_MANIFEST: &str = "extractor.json";

fn param_file(name: &str) -> String {
    format!("{}.bin", name.replace('.', "_"))
}

impl FeatureExtractor {
    /// Writes `extractor.json` and one `f64` blob per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (name, value) in self.params.names().iter().zip(self.params.values()) {
            blob::write(&dir.join(param_file(name)), value, DType::F64)?;
        }
        let manifest = ExtractorManifest {
            provenance: self.provenance.clone(),
            words: self.words.clone(),
            params: self.params.names().to_vec(),
        };
        let path = dir.join(EXTRACTOR_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(EXTRACTOR_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: ExtractorManifest = serde_json::from_str(&text)
            .map_err(|e| Error::integrity(path.display().to_string(), e.to_string()))?;
        let mut params = ParamStore::new();
        for name in &manifest.params {
            let t = blob::read(&dir.join(param_file(name)))?;
            let i = params.insert(name, t.clone());
            params.set_exact(i, t);
        }
        Self::from_parts(manifest.words, params, manifest.provenance)
    }
}

/// Personalized tokens follow the `V<digits>` naming or contain a `*`.
fn is_personalized_token(w: &str) -> bool {
    w.contains('*')
        || (w.len() > 1 && w.starts_with('V') && w[1..].chars().all(|c| c.is_ascii_digit()))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the extractor with a symmetric InfoNCE objective. Every base word
/// of `vocab` (other than the start token) must occur in the corpus.
pub fn fit_extractor(
    corpus: &[(Tensor, String)],
    vocab: &Vocabulary,
    config: &ExtractorConfig,
    seed: u64,
) -> Result<FeatureExtractor> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("extractor corpus".into()));
    }
    if config.batch < 2 || config.steps == 0 || config.temperature <= 0.0 {
        return Err(Error::config("extractor", "batch >= 2, steps > 0 and temperature > 0 required"));
    }
    let words: Vec<String> = vocab
        .base_words()
        .iter()
        .filter(|w| *w != START_TOKEN)
        .cloned()
        .collect();
    let missing: Vec<String> = words
        .iter()
        .filter(|w| !corpus.iter().any(|(_, p)| p.split_whitespace().any(|x| x == w.as_str())))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let image_len = corpus[0].0.len();
    let mut ext = FeatureExtractor::init(words, image_len, config, seed::derive(seed, "extractor-init"));
    let bags: Vec<Vec<f64>> = corpus.iter().map(|(_, p)| ext.bag(p)).collect::<Result<_>>()?;
    let mut rng = seed::rng(seed::derive(seed, "extractor-batches"));
    let mut adam = Adam::new(&ext.params, TrainScope::All, AdamConfig::with_lr(config.lr));
    let batch = config.batch.min(corpus.len());
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..corpus.len())).collect();
        let mut g = Graph::new();
        let p = ext.params.bind(&mut g, &TrainScope::All);
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &corpus[i].0).collect();
        let x = g.constant(ext.image_rows(&imgs)?);
        let bag_data: Vec<f64> = idx.iter().flat_map(|&i| bags[i].iter().copied()).collect();
        let b = g.constant(Tensor::new(vec![batch, ext.words.len()], bag_data));
        let fi = ext.image_graph(&mut g, &p, x);
        let ft = ext.text_graph(&mut g, &p, b);
        let loss = info_nce(&mut g, fi, ft, &idx, &bags, config.temperature);
        let grads = g.backward(loss);
        adam.step(&mut ext.params, &p, &grads);
    }
    ext.provenance = format!("fit:seed={seed},n={},steps={}", corpus.len(), config.steps);
    Ok(ext)
}

/// Symmetric contrastive loss. Pairs whose prompts have identical bags are
/// all treated as positives (their probability mass is pooled).
fn info_nce(g: &mut Graph, fi: Var, ft: Var, idx: &[usize], bags: &[Vec<f64>], temp: f64) -> Var {
    let n = idx.len();
    let tt = g.transpose(ft);
    let logits = g.matmul(fi, tt);
    let logits = g.scale(logits, 1.0 / temp);
    let lt = g.transpose(logits);
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| bags[idx[i]] == bags[idx[j]]).collect();
        for &j in &positives {
            mask[i * n + j] = 1.0 / positives.len() as f64;
        }
    }
    let mut total = None;
    for l in [logits, lt] {
        let ls = g.log_softmax_rows(l);
        let picked = g.mul_const(ls, mask.clone());
        let s = g.sum(picked);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    g.scale(total.expect("two directions"), -1.0 / (2.0 * n as f64))
}

/// Fraction of held-out pairs whose image is closer to its own prompt than
/// to the next prompt in the list with different content.
pub fn retrieval_accuracy(ext: &FeatureExtractor, heldout: &[(Tensor, String)]) -> Result<f64> {
    let imgs: Vec<&Tensor> = heldout.iter().map(|(i, _)| i).collect();
    let fi = ext.encode_images(&imgs)?;
    let ft: Vec<Vec<f64>> = heldout.iter().map(|(_, p)| ext.encode_text(p)).collect::<Result<_>>()?;
    let bags: Vec<Vec<f64>> = heldout.iter().map(|(_, p)| ext.bag(p)).collect::<Result<_>>()?;
    let n = heldout.len();
    let mut hits = 0;
    let mut trials = 0;
    for i in 0..n {
        let Some(j) = (1..n).map(|o| (i + o) % n).find(|&j| content(&bags[j], ext) != content(&bags[i], ext))
        else {
            continue;
        };
        trials += 1;
        if dot(&fi[i], &ft[i]) > dot(&fi[i], &ft[j]) {
            hits += 1;
        }
    }
    if trials == 0 {
        return Err(Error::EmptyInput("held-out pairs with distinct content".into()));
    }
    Ok(hits as f64 / trials as f64)
}

/// Content words (class nouns and colors) present in a bag.
fn content(bag: &[f64], ext: &FeatureExtractor) -> Vec<usize> {
    use crate::diffusion::text::{CLASS_NOUNS, COLOR_WORDS};
    (0..bag.len())
        .filter(|&i| {
            bag[i] > 0.0
                && (CLASS_NOUNS.contains(&ext.words[i].as_str())
                    || COLOR_WORDS.contains(&ext.words[i].as_str()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_templates, pretraining_corpus};

    fn small_config() -> ExtractorConfig {
        ExtractorConfig {
            steps: 5,
            batch: 8,
            ..ExtractorConfig::default()
        }
    }

    #[test]
    fn coverage_error_names_missing_words() {
        let corpus = vec![(Tensor::zeros(vec![3, 16, 16]), "a photo of dog".to_string())];
        match fit_extractor(&corpus, &Vocabulary::standard(2), &small_config(), 0) {
            Err(Error::Coverage(words)) => assert!(words.contains(&"cat".to_string())),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = pretraining_corpus(200, 16, &default_templates(), 4).unwrap();
        let ext = fit_extractor(&corpus, &Vocabulary::standard(2), &small_config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ext.save(dir.path()).unwrap();
        assert_eq!(FeatureExtractor::load(dir.path()).unwrap(), ext);
    }

    #[test]
    fn deterministic_and_normalized() {
        let corpus = pretraining_corpus(300, 16, &default_templates(), 1).unwrap();
        let v = Vocabulary::standard(2);
        let a = fit_extractor(&corpus, &v, &small_config(), 3).unwrap();
        let b = fit_extractor(&corpus, &v, &small_config(), 3).unwrap();
        assert_eq!(a, b);
        let f = a.encode_image(&corpus[0].0).unwrap();
        assert!((dot(&f, &f) - 1.0).abs() < 1e-6);
        let t = a.encode_text("a photo of V1 dog").unwrap();
        assert!((dot(&t, &t) - 1.0).abs() < 1e-6);
        assert_eq!(t, a.encode_text("a photo of dog").unwrap());
        assert!(matches!(a.encode_text("a photo of zebra"), Err(Error::UnknownToken(_))));
    }
}
