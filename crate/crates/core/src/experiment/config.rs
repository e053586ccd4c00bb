use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_sequence, validate_sequence, ConceptSpec};
use crate::diffusion::{ArchConfig, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::metrics::{EvalConfig, ExtractorConfig};
use crate::trainer::{LossWeights, PretrainConfig, TrainConfig};

/// Everything one experiment needs. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Run directory.
    pub out: PathBuf,
    pub arch: ArchConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub extractor: ExtractorConfig,
    /// Real images per concept.
    pub images_per_task: usize,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    /// The task sequence, in learning order.
    pub concepts: Vec<ConceptSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            arch: ArchConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            extractor: ExtractorConfig::default(),
            images_per_task: 4,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            concepts: default_sequence(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_tame: bool,
    pub no_ecd: bool,
    pub no_caa: bool,
    pub no_oaa: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        fs::write(path, self.to_json()).map_err(Error::io(path))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.no_tame {
            self.train.ablation.use_tame = false;
        }
        if o.no_ecd {
            self.train.ablation.use_ecd = false;
        }
        if o.no_caa {
            self.guidance.use_caa = false;
        }
        if o.no_oaa {
            self.guidance.use_oaa = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let schedule = NoiseSchedule::new(self.schedule)?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.train.sampler.validate(&schedule)?;
        self.eval.sampler.validate(&schedule)?;
        self.weights.validate()?;
        self.guidance.validate()?;
        if self.eval.samples_per_prompt == 0 || self.eval.prompts == 0 {
            return Err(Error::config("eval", "samples_per_prompt and prompts must be positive"));
        }
        let e = &self.extractor;
        if e.steps == 0 || e.batch < 2 || e.dim == 0 || e.corpus_size == 0 || e.heldout_size == 0 {
            return Err(Error::config(
                "extractor",
                "needs steps, dim, corpus_size and heldout_size > 0 and batch >= 2",
            ));
        }
        if !(3..=5).contains(&self.images_per_task) {
            return Err(Error::config("images_per_task", "must be in [3, 5]"));
        }
        if self.concepts.is_empty() {
            return Err(Error::config("concepts", "the task sequence is empty"));
        }
        if self.concepts.len() > self.arch.max_personalized {
            return Err(Error::config(
                "concepts",
                format!(
                    "{} tasks exceed the {} personalized token slots",
                    self.concepts.len(),
                    self.arch.max_personalized
                ),
            ));
        }
        for c in &self.concepts {
            c.validate()?;
        }
        validate_sequence(&self.concepts)
    }

    /// Short name of the training objective selected by the ablation flags.
    pub fn method_label(&self) -> &'static str {
        match (self.train.ablation.use_tame, self.train.ablation.use_ecd) {
            (true, true) => "full",
            (false, true) => "no-tame",
            (true, false) => "no-ecd",
            (false, false) => "fine-tune",
        }
    }

    /// The parts of the config a task sequence depends on. Resuming is
    /// refused when these differ from the stored run.
    pub(crate) fn sequence_key(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "arch": self.arch,
            "schedule": self.schedule,
            "pretrain": self.pretrain,
            "extractor": self.extractor,
            "images_per_task": self.images_per_task,
            "train": self.train,
            "weights": self.weights,
            "concepts": self.concepts,
        })
    }
}
