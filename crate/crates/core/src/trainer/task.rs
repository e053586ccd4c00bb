use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::data::{build_prior_dataset, subsample_prior, PriorDataset, TaskDataset};
use crate::diffusion::{draw_samples, DenoiserModel, NoisePredictor, NoisedSample, SamplerConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::memory::{select_short_term, update_long_term, BankConfig, LongTermBank, ShortTermBank};
use crate::metrics::FeatureExtractor;
use crate::params::{Adam, AdamConfig};
use crate::seed;
use crate::trainer::losses::{combined_loss, Ablation, LossWeights, StepBatch, TeacherSnapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Prior images generated per task.
    pub prior_size: usize,
    /// Prior images kept per learned task.
    pub prior_keep: usize,
    pub ablation: Ablation,
    pub bank: BankConfig,
    /// Sampler used for prior images and memory candidates.
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 5e-4,
            batch: 2,
            prior_size: 200,
            prior_keep: 50,
            ablation: Ablation::default(),
            bank: BankConfig::default(),
            sampler: SamplerConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.prior_size == 0 {
            return Err(Error::Range("prior size N_p must be positive".into()));
        }
        if self.prior_keep == 0 || self.prior_keep > self.prior_size {
            return Err(Error::config("train.prior_keep", "must be in [1, prior_size]"));
        }
        self.bank.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub task_loss: f64,
    pub tame_loss: f64,
    pub ecd_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,task_loss,tame_loss,ecd_loss,total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.task_loss, r.tame_loss, r.ecd_loss, r.total);
        }
        s
    }

    pub fn from_csv(text: &str, location: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("step,task_loss,tame_loss,ecd_loss,total") {
            return Err(Error::integrity(location, "unexpected training log header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::integrity(location, format!("malformed row {}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            rows.push(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                task_loss: num(1)?,
                tame_loss: num(2)?,
                ecd_loss: num(3)?,
                total: num(4)?,
            });
        }
        Ok(Self { rows })
    }
}

/// Stages of one task, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    SnapshotTeacher,
    BuildShortTerm,
    GeneratePrior,
    Optimize,
    UpdateLongTerm,
}

pub struct TaskOutcome {
    pub model: DenoiserModel,
    pub teacher: TeacherSnapshot,
    pub long: LongTermBank,
    pub short: ShortTermBank,
    /// The kept prior subset of this task.
    pub prior: PriorDataset,
    pub log: TrainingLog,
    pub stages: Vec<Stage>,
}

fn pick(rng: &mut seed::Rng, pool: &[(Tensor, TokenSequence)], n: usize) -> Vec<(Tensor, TokenSequence)> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

fn draw(rng: &mut seed::Rng, model: &DenoiserModel, pool: &[(Tensor, TokenSequence)], n: usize) -> Vec<NoisedSample> {
    let pairs = pick(rng, pool, n);
    draw_samples(rng, model.schedule(), &pairs)
}

/// Learns task `k`: snapshot the teacher, build the short-term bank, sample
/// the prior set from the snapshot, optimize, then add the task's real
/// images to the long-term bank. `priors` holds the kept prior subsets of
/// tasks `1..k`.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &DenoiserModel,
    k: usize,
    task: &TaskDataset,
    long: &LongTermBank,
    priors: &[PriorDataset],
    ext: &FeatureExtractor,
    config: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<TaskOutcome> {
    config.validate()?;
    weights.validate()?;
    let expected = long.tasks().len() + 1;
    let consistent = long.tasks() == (1..expected).collect::<Vec<_>>() && priors.len() == expected - 1;
    if k != expected || task.task != k || !consistent {
        return Err(Error::Sequencing {
            expected,
            got: if k != expected { k } else { task.task },
        });
    }
    let mut stages = Vec::new();

    let teacher = TeacherSnapshot::of(model);
    stages.push(Stage::SnapshotTeacher);

    let ablation = config.ablation;
    let needs_memory = k > 1 && (ablation.use_tame || ablation.use_ecd);
    let short = if needs_memory {
        select_short_term(
            teacher.model(),
            long,
            ext,
            &config.bank,
            &config.sampler,
            seed::derive(seed, "short-term"),
        )?
    } else {
        ShortTermBank::default()
    };
    stages.push(Stage::BuildShortTerm);

    let class_prompt = task.concept.class_prompt();
    let full_prior = build_prior_dataset(
        teacher.model(),
        teacher.model().version(),
        &class_prompt,
        config.prior_size,
        &config.sampler,
        seed::derive(seed, "prior"),
    )?;
    let prior = subsample_prior(&full_prior, config.prior_keep, seed::derive(seed, "prior-subsample"))?;
    stages.push(Stage::GeneratePrior);

    let mut student = model.clone();
    student.register_personalized(&task.concept.token)?;
    student.set_version(k);
    let tokens: Vec<String> = student.vocab().personalized().to_vec();
    let scope = student.personalization_scope(&tokens);

    let tokenize = |pairs: Vec<(Tensor, String)>| -> Result<Vec<(Tensor, TokenSequence)>> {
        pairs.into_iter().map(|(x, p)| Ok((x, student.tokenize(&p)?))).collect()
    };
    let task_pool = tokenize(task.items.iter().map(|i| (i.image.clone(), i.prompt.clone())).collect())?;
    let mut prior_pools = Vec::new();
    for p in priors.iter().chain(std::iter::once(&prior)) {
        prior_pools.push(tokenize(p.images.iter().map(|x| (x.clone(), p.class_prompt.clone())).collect())?);
    }
    let mut rehearsal_pools = Vec::new();
    for l in 1..k {
        let pool = tokenize(
            short
                .entries
                .iter()
                .filter(|e| e.task == l)
                .map(|e| (e.image.clone(), e.prompt.clone()))
                .collect(),
        )?;
        rehearsal_pools.push(pool);
    }

    let mut rng = seed::rng(seed::derive(seed, "train-steps"));
    let mut adam = Adam::new(student.params(), scope.clone(), AdamConfig::with_lr(config.lr));
    let mut log = TrainingLog::default();
    let all_priors = k > 1 && ablation.use_tame;
    for step in 1..=config.steps {
        let mut batch = StepBatch {
            task: draw(&mut rng, &student, &task_pool, config.batch),
            ..StepBatch::default()
        };
        for (i, pool) in prior_pools.iter().enumerate() {
            let wanted = all_priors || i + 1 == k;
            batch.priors.push(if wanted {
                draw(&mut rng, &student, pool, config.batch)
            } else {
                Vec::new()
            });
        }
        if needs_memory {
            for pool in &rehearsal_pools {
                batch.rehearsal.push(if pool.is_empty() {
                    Vec::new()
                } else {
                    draw(&mut rng, &student, pool, config.batch)
                });
            }
        }
        let mut g = Graph::new();
        let params = student.bind(&mut g, &scope);
        let terms = combined_loss(&mut g, &student, &params, Some(&teacher), k, &batch, weights, ablation)?;
        let row = LogRow {
            step,
            task_loss: g.scalar_value(terms.task),
            tame_loss: g.scalar_value(terms.tame),
            ecd_loss: g.scalar_value(terms.ecd),
            total: g.scalar_value(terms.total),
        };
        if !row.total.is_finite() {
            return Err(Error::TrainingFailure(format!("non-finite loss at task {k} step {step}")));
        }
        log.rows.push(row);
        let grads = g.backward(terms.total);
        adam.step(student.params_mut(), &params, &grads);
    }
    stages.push(Stage::Optimize);

    let long = update_long_term(long, task, ext)?;
    stages.push(Stage::UpdateLongTerm);

    Ok(TaskOutcome {
        model: student,
        teacher,
        long,
        short,
        prior,
        log,
        stages,
    })
}
