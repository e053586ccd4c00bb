//! End-to-end experiment driver: configuration, run-directory layout and
//! the pretrain / sequence / evaluate / generate / report commands.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Overrides};
pub use report::{run_report, ReportBundle};
pub use run::{
    completed_tasks, run_evaluate, run_generate, run_pretrain, run_sequence, task_datasets,
    GeneratedImage, PretrainSummary, RunLayout, SequenceSummary,
};
