use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::metrics::FeatureExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Candidates generated per stored prompt.
    pub eta: usize,
    /// Weight of the fidelity term of the selection score.
    pub beta_score: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            eta: 4,
            beta_score: 1.0,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta == 0 {
            return Err(Error::config("bank.eta", "must be at least 1"));
        }
        if !(self.beta_score >= 0.0) {
            return Err(Error::config("bank.beta_score", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTermEntry {
    /// Unit-norm image feature of a real task image.
    pub feature: Vec<f64>,
    pub prompt: String,
    pub task: usize,
}

/// Features and prompts of every real image seen so far. Append-only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LongTermBank {
    entries: Vec<LongTermEntry>,
}

impl LongTermBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LongTermEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_task(&self, task: usize) -> bool {
        self.entries.iter().any(|e| e.task == task)
    }

    /// Tasks present, ascending.
    pub fn tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.entries.iter().map(|e| e.task).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub(crate) fn restore(&mut self, entries: Vec<LongTermEntry>) {
        self.entries = entries;
    }

    /// Appends a task's entries; features are normalized on insertion.
    pub fn push_task(&mut self, task: usize, entries: Vec<(Vec<f64>, String)>) -> Result<()> {
        if self.contains_task(task) {
            return Err(Error::DuplicateTask(task));
        }
        for (f, prompt) in entries {
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Range(format!("feature of task {task} has norm {norm}")));
            }
            self.entries.push(LongTermEntry {
                feature: f.iter().map(|x| x / norm).collect(),
                prompt,
                task,
            });
        }
        Ok(())
    }
}

/// Adds the features and prompts of a task's real images.
pub fn update_long_term(
    bank: &LongTermBank,
    task: &TaskDataset,
    ext: &FeatureExtractor,
) -> Result<LongTermBank> {
    if bank.contains_task(task.task) {
        return Err(Error::DuplicateTask(task.task));
    }
    let feats = ext.encode_images(&task.images())?;
    let mut out = bank.clone();
    out.push_task(
        task.task,
        feats
            .into_iter()
            .zip(task.items.iter().map(|i| i.prompt.clone()))
            .collect(),
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortTermEntry {
    pub image: Tensor,
    pub prompt: String,
    pub task: usize,
    pub score: f64,
    /// Index of the winning candidate among the `eta` generated.
    pub candidate: usize,
}

/// Selected generated rehearsal images, one per long-term entry of earlier
/// tasks. Rebuilt from scratch for every task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShortTermBank {
    pub entries: Vec<ShortTermEntry>,
}

impl ShortTermBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
