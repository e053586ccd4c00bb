use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::blob::{self, DType};
use crate::data::concept::ConceptSpec;
use crate::data::image::write_png;
use crate::data::render::{self, palette_hue, Placement, ShapeFamily, Texture};
use crate::data::templates::PromptTemplate;
use crate::diffusion::sampler::{sample, SamplerConfig};
use crate::diffusion::text::{CLASS_NOUNS, COLOR_WORDS};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::seed;

pub const MIN_IMAGES: usize = 3;
pub const MAX_IMAGES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskItem {
    pub image: Tensor,
    pub prompt: String,
    pub seed: u64,
}

/// The few-shot data of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    pub concept: ConceptSpec,
    pub items: Vec<TaskItem>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.items.iter().map(|i| &i.image).collect()
    }
}

/// Images sampled from a frozen snapshot for one class prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDataset {
    pub class_prompt: String,
    /// Version of the snapshot that generated the images.
    pub source_version: usize,
    pub images: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

impl PriorDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

const SIZE_JITTER: (f64, f64) = (0.85, 1.1);
const MAX_ROTATION: f64 = 0.5;

fn jittered(
    rng: &mut seed::Rng,
    family: ShapeFamily,
    hue: f64,
    texture: Texture,
    center: (f64, f64),
    radius: f64,
    shift: f64,
) -> Placement {
    Placement {
        family,
        hue,
        texture,
        cx: center.0 + rng.random_range(-shift..=shift),
        cy: center.1 + rng.random_range(-shift..=shift),
        radius: radius * rng.random_range(SIZE_JITTER.0..=SIZE_JITTER.1),
        rotation: rng.random_range(-MAX_ROTATION..=MAX_ROTATION),
    }
}

/// Renders one image of `spec` at a jittered pose.
pub fn render_concept(spec: &ConceptSpec, size: usize, image_seed: u64) -> Tensor {
    let mut rng = seed::rng(image_seed);
    let c = size as f64 / 2.0;
    let p = jittered(
        &mut rng,
        spec.family(),
        spec.hue,
        spec.texture(),
        (c, c),
        0.34 * size as f64 * spec.scale,
        size as f64 / 8.0,
    );
    render::render(size, &[p])
}

/// Side-by-side rendering of two concepts, first on the left.
pub fn render_pair(a: &ConceptSpec, b: &ConceptSpec, size: usize, image_seed: u64) -> Tensor {
    let mut rng = seed::rng(image_seed);
    let s = size as f64;
    let r = 0.22 * s;
    let pa = jittered(&mut rng, a.family(), a.hue, a.texture(), (0.27 * s, 0.5 * s), r * a.scale, 1.0);
    let pb = jittered(&mut rng, b.family(), b.hue, b.texture(), (0.73 * s, 0.5 * s), r * b.scale, 1.0);
    render::render(size, &[pa, pb])
}

/// Few-shot images of a concept with their training prompts. Image `i`
/// uses template `i mod templates.len()`.
pub fn generate_concept_images(
    task: usize,
    spec: &ConceptSpec,
    count: usize,
    size: usize,
    templates: &[PromptTemplate],
    seed: u64,
) -> Result<TaskDataset> {
    if !(MIN_IMAGES..=MAX_IMAGES).contains(&count) {
        return Err(Error::Range(format!(
            "image count {count} outside [{MIN_IMAGES}, {MAX_IMAGES}]"
        )));
    }
    spec.validate()?;
    if templates.is_empty() {
        return Err(Error::EmptyInput("template list".into()));
    }
    let items = (0..count)
        .map(|i| {
            let s = seed::derive_indexed(seed, "concept-image", i as u64);
            TaskItem {
                image: render_concept(spec, size, s),
                prompt: templates[i % templates.len()].fill(&spec.phrase()),
                seed: s,
            }
        })
        .collect();
    Ok(TaskDataset {
        task,
        concept: spec.clone(),
        items,
    })
}

/// Whether no image appears in two different tasks.
pub fn tasks_disjoint(tasks: &[TaskDataset]) -> bool {
    for (i, a) in tasks.iter().enumerate() {
        for b in &tasks[..i] {
            for x in &a.items {
                if b.items.iter().any(|y| y.image == x.image) {
                    return false;
                }
            }
        }
    }
    true
}

/// Generic pretraining pairs: palette-colored plain shapes. Roughly a
/// quarter of the images hold two objects ("red dog and blue cat", first
/// on the left); color words are dropped from half of the prompts.
pub fn pretraining_corpus(
    count: usize,
    size: usize,
    templates: &[PromptTemplate],
    seed: u64,
) -> Result<Vec<(Tensor, String)>> {
    if templates.is_empty() {
        return Err(Error::EmptyInput("template list".into()));
    }
    let mut rng = seed::rng(seed::derive(seed, "pretraining-corpus"));
    let s = size as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let template = &templates[rng.random_range(0..templates.len())];
        let with_color = rng.random_bool(0.5);
        let pick = |rng: &mut seed::Rng| {
            let noun = CLASS_NOUNS[rng.random_range(0..CLASS_NOUNS.len())];
            let color = COLOR_WORDS[rng.random_range(0..COLOR_WORDS.len())];
            let hue = palette_hue(color).expect("palette color") + rng.random_range(-8.0..=8.0);
            let phrase = if with_color {
                format!("{color} {noun}")
            } else {
                noun.to_string()
            };
            (ShapeFamily::for_noun(noun).expect("class noun"), hue, phrase)
        };
        if rng.random_bool(0.25) {
            let (fa, ha, pa) = pick(&mut rng);
            let (fb, hb, pb) = pick(&mut rng);
            let r = 0.22 * s;
            let a = jittered(&mut rng, fa, ha, Texture::Plain, (0.27 * s, 0.5 * s), r, 1.0);
            let b = jittered(&mut rng, fb, hb, Texture::Plain, (0.73 * s, 0.5 * s), r, 1.0);
            out.push((render::render(size, &[a, b]), template.fill(&format!("{pa} and {pb}"))));
        } else {
            let (f, h, p) = pick(&mut rng);
            let o = jittered(&mut rng, f, h, Texture::Plain, (s / 2.0, s / 2.0), 0.34 * s, s / 8.0);
            out.push((render::render(size, &[o]), template.fill(&p)));
        }
    }
    Ok(out)
}

/// Samples `n_p` images for `class_prompt` from a frozen snapshot.
pub fn build_prior_dataset<M: NoisePredictor + ?Sized>(
    frozen: &M,
    source_version: usize,
    class_prompt: &str,
    n_p: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PriorDataset> {
    if n_p == 0 {
        return Err(Error::Range("prior size N_p must be positive".into()));
    }
    let mut images = Vec::with_capacity(n_p);
    let mut seeds = Vec::with_capacity(n_p);
    for i in 0..n_p {
        let s = seed::derive_indexed(seed, "prior-image", i as u64);
        images.push(sample(frozen, class_prompt, sampler, s)?);
        seeds.push(s);
    }
    Ok(PriorDataset {
        class_prompt: class_prompt.to_string(),
        source_version,
        images,
        seeds,
    })
}

/// Indices of a uniform `m`-subset of `0..n` (partial Fisher-Yates, in
/// draw order).
pub fn sample_indices(n: usize, m: usize, rng: &mut seed::Rng) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::Range(format!("cannot draw {m} of {n} without replacement")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    Ok(idx)
}

pub fn subsample_prior(prior: &PriorDataset, m: usize, seed: u64) -> Result<PriorDataset> {
    let mut rng = seed::rng(seed);
    let idx = sample_indices(prior.len(), m, &mut rng)?;
    Ok(PriorDataset {
        class_prompt: prior.class_prompt.clone(),
        source_version: prior.source_version,
        images: idx.iter().map(|&i| prior.images[i].clone()).collect(),
        seeds: idx.iter().map(|&i| prior.seeds[i]).collect(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskIndex {
    task: usize,
    concept: ConceptSpec,
    items: Vec<TaskIndexItem>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskIndexItem {
    file: String,
    prompt: String,
    concept_id: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorIndex {
    class_prompt: String,
    source_version: usize,
    items: Vec<PriorIndexItem>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorIndexItem {
    file: String,
    seed: u64,
}

const INDEX: &str = "index.json";

pub fn task_dir(root: &Path, task: usize) -> PathBuf {
    root.join(format!("task-{task}"))
}

pub fn prior_dir(root: &Path, task: usize) -> PathBuf {
    root.join(format!("prior-{task}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::integrity(path.display().to_string(), e.to_string()))
}

/// Writes `root/task-{k}/` with lossless blobs, PNG previews and an index.
pub fn save_task(task: &TaskDataset, root: &Path) -> Result<PathBuf> {
    let dir = task_dir(root, task.task);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let mut items = Vec::new();
    for (i, item) in task.items.iter().enumerate() {
        let file = format!("img-{i}.bin");
        blob::write(&dir.join(&file), &item.image, DType::F64)?;
        write_png(&dir.join(format!("img-{i}.png")), &item.image)?;
        items.push(TaskIndexItem {
            file,
            prompt: item.prompt.clone(),
            concept_id: task.concept.id,
            seed: item.seed,
        });
    }
    write_json(
        &dir.join(INDEX),
        &TaskIndex {
            task: task.task,
            concept: task.concept.clone(),
            items,
        },
    )?;
    Ok(dir)
}

pub fn load_task(root: &Path, task: usize) -> Result<TaskDataset> {
    let dir = task_dir(root, task);
    let index: TaskIndex = read_json(&dir.join(INDEX))?;
    if index.task != task {
        return Err(Error::Sequencing {
            expected: task,
            got: index.task,
        });
    }
    let items = index
        .items
        .into_iter()
        .map(|it| {
            Ok(TaskItem {
                image: blob::read(&dir.join(&it.file))?,
                prompt: it.prompt,
                seed: it.seed,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskDataset {
        task,
        concept: index.concept,
        items,
    })
}

pub fn save_prior(prior: &PriorDataset, root: &Path, task: usize) -> Result<PathBuf> {
    let dir = prior_dir(root, task);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let mut items = Vec::new();
    for (i, (img, &s)) in prior.images.iter().zip(&prior.seeds).enumerate() {
        let file = format!("img-{i}.bin");
        blob::write(&dir.join(&file), img, DType::F64)?;
        items.push(PriorIndexItem { file, seed: s });
    }
    write_json(
        &dir.join(INDEX),
        &PriorIndex {
            class_prompt: prior.class_prompt.clone(),
            source_version: prior.source_version,
            items,
        },
    )?;
    Ok(dir)
}

pub fn load_prior(root: &Path, task: usize) -> Result<PriorDataset> {
    let dir = prior_dir(root, task);
    let index: PriorIndex = read_json(&dir.join(INDEX))?;
    let mut images = Vec::new();
    let mut seeds = Vec::new();
    for it in index.items {
        images.push(blob::read(&dir.join(&it.file))?);
        seeds.push(it.seed);
    }
    Ok(PriorDataset {
        class_prompt: index.class_prompt,
        source_version: index.source_version,
        images,
        seeds,
    })
}
