//! Training objectives, per-task lifelong training and base pre-training.

pub mod losses;
pub mod pretrain;
pub mod task;

pub use losses::{
    combined_loss, combined_loss_values, ecd_loss, pdm_loss, tame_loss, Ablation, LossTerms,
    LossValues, LossWeights, StepBatch, TeacherSnapshot,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use task::{train_task, LogRow, Stage, TaskOutcome, TrainConfig, TrainingLog};
