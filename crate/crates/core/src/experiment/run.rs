use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::blob::{self, DType};
use crate::data::image::{tile, write_png};
use crate::data::{
    default_templates, generate_concept_images, load_prior, load_task, pretraining_corpus, save_prior,
    save_task, PriorDataset, TaskDataset,
};
use crate::diffusion::{checkpoint, sample, DenoiserModel};
use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::guidance::{guided_sample, GuidanceLossReport};
use crate::memory::{load_long_term, save_long_term, save_short_term, LongTermBank};
use crate::metrics::{evaluate_sequence, fit_extractor, retrieval_accuracy, tfr, AlignmentMatrix, FeatureExtractor};
use crate::seed;
use crate::trainer::{pretrain, train_task, PretrainReport};

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base().join("checkpoint")
    }

    pub fn extractor(&self) -> PathBuf {
        self.base().join("extractor")
    }

    pub fn task(&self, k: usize) -> PathBuf {
        self.root.join(format!("task-{k}"))
    }

    pub fn checkpoint(&self, k: usize) -> PathBuf {
        self.task(k).join("checkpoint")
    }

    pub fn teacher(&self, k: usize) -> PathBuf {
        self.task(k).join("teacher")
    }

    pub fn log(&self, k: usize) -> PathBuf {
        self.task(k).join("log.csv")
    }

    fn marker(&self, k: usize) -> PathBuf {
        self.task(k).join("complete.json")
    }

    pub fn banks(&self) -> PathBuf {
        self.root.join("banks")
    }

    pub fn long_term(&self, k: usize) -> PathBuf {
        self.banks().join(format!("long-term-{k}"))
    }

    pub fn short_term(&self, k: usize) -> PathBuf {
        self.banks().join(format!("short-term-{k}"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn alignment(&self) -> PathBuf {
        self.eval().join("alignment.csv")
    }

    pub fn tfr(&self) -> PathBuf {
        self.eval().join("tfr.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// Checksum over every file of a directory, in name order.
fn fingerprint(dir: &Path) -> Result<u64> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<_>>()?;
    names.sort();
    let mut bytes = Vec::new();
    for p in names.iter().filter(|p| p.is_file()) {
        bytes.extend_from_slice(p.file_name().unwrap_or_default().as_encoded_bytes());
        bytes.extend(fs::read(p).map_err(Error::io(p))?);
    }
    Ok(blob::checksum(&bytes))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskMarker {
    task: usize,
    checkpoint: String,
}

fn write_marker(layout: &RunLayout, k: usize) -> Result<()> {
    let marker = TaskMarker {
        task: k,
        checkpoint: format!("{:016x}", fingerprint(&layout.checkpoint(k))?),
    };
    write_text(&layout.marker(k), &serde_json::to_string_pretty(&marker)?)
}

/// Whether task `k` finished and its checkpoint still matches the marker.
fn task_complete(layout: &RunLayout, k: usize) -> Result<bool> {
    let path = layout.marker(k);
    if !path.exists() {
        return Ok(false);
    }
    let location = path.display().to_string();
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let marker: TaskMarker =
        serde_json::from_str(&text).map_err(|e| Error::integrity(&location, e.to_string()))?;
    if marker.task != k {
        return Err(Error::integrity(location, format!("marker names task {}", marker.task)));
    }
    let actual = format!("{:016x}", fingerprint(&layout.checkpoint(k))?);
    if actual != marker.checkpoint {
        return Err(Error::integrity(location, "checkpoint changed after the task completed"));
    }
    Ok(true)
}

/// Number of leading tasks that completed, out of `total`.
pub fn completed_tasks(layout: &RunLayout, total: usize) -> Result<usize> {
    let mut n = 0;
    while n < total && task_complete(layout, n + 1)? {
        n += 1;
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps_run: usize,
    pub converged_early: bool,
    pub start_loss: f64,
    pub end_loss: f64,
    /// Held-out retrieval accuracy of the fitted feature extractor.
    pub retrieval: f64,
}

/// Trains the base model and fits the shared feature extractor, writing
/// both under `base/`.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<(PretrainReport, PretrainSummary)> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out);
    create_dir(&layout.base())?;
    cfg.save(&layout.config())?;
    let templates = default_templates();
    let size = cfg.arch.resolution;
    let corpus = pretraining_corpus(
        cfg.pretrain.corpus_size,
        size,
        &templates,
        seed::derive(cfg.seed, "pretrain-corpus"),
    )?;
    let heldout = pretraining_corpus(
        cfg.pretrain.heldout_size,
        size,
        &templates,
        seed::derive(cfg.seed, "pretrain-heldout"),
    )?;
    let mut model = DenoiserModel::new(cfg.arch, cfg.schedule, seed::derive(cfg.seed, "model-init"))?;
    info!("pre-training on {} pairs", corpus.len());
    let report = pretrain(&mut model, &corpus, &heldout, &cfg.pretrain, seed::derive(cfg.seed, "pretrain"))?;
    checkpoint::save(&model, &layout.base_checkpoint(), "base")?;
    write_text(&layout.base().join("pretrain.csv"), &report.to_csv())?;

    info!("fitting feature extractor");
    let ext_corpus = pretraining_corpus(
        cfg.extractor.corpus_size,
        size,
        &templates,
        seed::derive(cfg.seed, "extractor-corpus"),
    )?;
    let ext_heldout = pretraining_corpus(
        cfg.extractor.heldout_size,
        size,
        &templates,
        seed::derive(cfg.seed, "extractor-heldout"),
    )?;
    let ext = fit_extractor(&ext_corpus, model.vocab(), &cfg.extractor, seed::derive(cfg.seed, "extractor"))?;
    let retrieval = retrieval_accuracy(&ext, &ext_heldout)?;
    ext.save(&layout.extractor())?;
    let summary = PretrainSummary {
        steps_run: report.steps_run,
        converged_early: report.converged_early,
        start_loss: report.start_loss(),
        end_loss: report.end_loss(),
        retrieval,
    };
    write_text(&layout.base().join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    info!(
        "held-out loss {:.4} -> {:.4}, extractor retrieval {:.3}",
        summary.start_loss, summary.end_loss, retrieval
    );
    Ok((report, summary))
}

/// The real images of every task in the sequence.
pub fn task_datasets(cfg: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    let templates = default_templates();
    cfg.concepts
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            generate_concept_images(
                i + 1,
                spec,
                cfg.images_per_task,
                cfg.arch.resolution,
                &templates,
                seed::derive_indexed(cfg.seed, "task-data", (i + 1) as u64),
            )
        })
        .collect()
}

fn check_resumable(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<()> {
    let path = layout.config();
    if !path.exists() {
        return Ok(());
    }
    let stored = ExperimentConfig::load(&path)?;
    if stored.sequence_key() != cfg.sequence_key() {
        return Err(Error::config(
            "resume",
            format!("{} was written by a different task-sequence configuration", path.display()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSummary {
    /// Tasks found complete on disk before this invocation.
    pub resumed_after: usize,
    /// Tasks completed in total.
    pub completed: usize,
}

/// Learns the configured task sequence in order. With `resume`, completed
/// tasks are reloaded and training continues after the last one.
/// `base` names the run directory holding the base model and extractor;
/// `None` means the run directory itself.
pub fn run_sequence(cfg: &ExperimentConfig, base: Option<&Path>, resume: bool) -> Result<SequenceSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out);
    let base_layout = RunLayout::new(base.unwrap_or(&cfg.out));
    if resume {
        check_resumable(cfg, &layout)?;
    }
    create_dir(layout.root())?;
    cfg.save(&layout.config())?;
    let (base_model, _) = checkpoint::load(&base_layout.base_checkpoint())?;
    let ext = FeatureExtractor::load(&base_layout.extractor())?;
    let tasks = task_datasets(cfg)?;
    let total = tasks.len();

    let done = if resume { completed_tasks(&layout, total)? } else { 0 };
    let (mut model, mut long, mut priors): (DenoiserModel, LongTermBank, Vec<PriorDataset>) = if done > 0 {
        info!("resuming after task {done}");
        let (m, _) = checkpoint::load(&layout.checkpoint(done))?;
        let priors = (1..=done)
            .map(|k| load_prior(&layout.task(k), k))
            .collect::<Result<_>>()?;
        (m, load_long_term(&layout.long_term(done))?, priors)
    } else {
        (base_model, LongTermBank::new(), Vec::new())
    };

    for k in done + 1..=total {
        let task = &tasks[k - 1];
        info!("task {k}/{total}: {}", task.concept.phrase());
        let dir = layout.task(k);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(Error::io(&dir))?;
        }
        save_task(task, layout.root())?;
        let outcome = train_task(
            &model,
            k,
            task,
            &long,
            &priors,
            &ext,
            &cfg.train,
            &cfg.weights,
            seed::derive_indexed(cfg.seed, "task", k as u64),
        )?;
        checkpoint::save(&outcome.model, &layout.checkpoint(k), &format!("task-{k}"))?;
        checkpoint::save(outcome.teacher.model(), &layout.teacher(k), &format!("teacher-{k}"))?;
        write_text(&layout.log(k), &outcome.log.to_csv())?;
        save_prior(&outcome.prior, &dir, k)?;
        save_long_term(&outcome.long, &layout.long_term(k))?;
        save_short_term(&outcome.short, &layout.short_term(k))?;
        let previews = (0..4)
            .map(|i| {
                sample(
                    &outcome.model,
                    &task.concept.instance_prompt(),
                    &cfg.eval.sampler,
                    seed::derive_indexed(cfg.seed, &format!("preview-{k}"), i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        write_png(&dir.join("samples.png"), &tile(&previews, 4, 4)?)?;
        write_marker(&layout, k)?;
        if let Some(last) = outcome.log.rows.last() {
            info!("task {k} done, final total loss {:.4}", last.total);
        }
        model = outcome.model;
        long = outcome.long;
        priors.push(outcome.prior);
    }
    Ok(SequenceSummary {
        resumed_after: done,
        completed: total,
    })
}

/// Fills the alignment matrix for every completed task and writes
/// `eval/alignment.csv` and, for two or more tasks, `eval/tfr.csv`.
pub fn run_evaluate(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<AlignmentMatrix> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out);
    let base_layout = RunLayout::new(base.unwrap_or(&cfg.out));
    let ext = FeatureExtractor::load(&base_layout.extractor())?;
    let total = completed_tasks(&layout, cfg.concepts.len())?;
    if total == 0 {
        return Err(Error::MissingArtifact(layout.marker(1)));
    }
    let models = (1..=total)
        .map(|k| checkpoint::load(&layout.checkpoint(k)).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let tasks = (1..=total)
        .map(|k| load_task(layout.root(), k))
        .collect::<Result<Vec<_>>>()?;
    info!("evaluating {total} task(s)");
    let matrix = evaluate_sequence(
        &models,
        &tasks,
        &default_templates(),
        &ext,
        &cfg.eval,
        seed::derive(cfg.seed, "evaluate"),
    )?;
    create_dir(&layout.eval())?;
    matrix.save(&layout.alignment())?;
    if total >= 2 {
        let (ia, ta) = tfr(&matrix, total)?;
        write_text(&layout.tfr(), &format!("k,tfr_ia,tfr_ta\n{total},{ia},{ta}\n"))?;
        info!("TFR-IA {ia:.2}, TFR-TA {ta:.2}");
    }
    Ok(matrix)
}

/// Files written for one generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub image: Tensor,
    pub png: PathBuf,
    pub report: GuidanceLossReport,
    pub report_csv: PathBuf,
}

/// Samples `count` images of `prompt` from a checkpoint with the configured
/// attention guidance. Image `i` is written as `sample-{i}.png` (preview),
/// `sample-{i}.bin` (lossless) and `guidance-{i}.csv`.
pub fn run_generate(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    prompt: &str,
    count: usize,
    out: &Path,
) -> Result<Vec<GeneratedImage>> {
    cfg.validate()?;
    let (model, _) = checkpoint::load(checkpoint_dir)?;
    let tokens = crate::diffusion::NoisePredictor::tokenize(&model, prompt)?;
    let mut guidance = cfg.guidance.clone();
    if tokens.personalized_indices.is_empty() && guidance.use_caa {
        warn!("prompt has no personalized token; attention guidance disabled");
        guidance.use_caa = false;
    }
    create_dir(out)?;
    (0..count)
        .map(|i| {
            let s = seed::derive_indexed(cfg.seed, "generate", i as u64);
            let (image, report) = guided_sample(&model, prompt, &guidance, &cfg.eval.sampler, s)?;
            let png = out.join(format!("sample-{i}.png"));
            let report_csv = out.join(format!("guidance-{i}.csv"));
            write_png(&png, &image)?;
            blob::write(&out.join(format!("sample-{i}.bin")), &image, DType::F64)?;
            write_text(&report_csv, &report.to_csv())?;
            Ok(GeneratedImage {
                image,
                png,
                report,
                report_csv,
            })
        })
        .collect()
}
