//! Procedural synthetic concepts, prompt templates and the task / prior
//! datasets built from them.

pub mod concept;
pub mod dataset;
pub mod image;
pub mod render;
pub mod templates;

pub use concept::{default_sequence, validate_sequence, ConceptSpec};
pub use dataset::{
    build_prior_dataset, generate_concept_images, load_prior, load_task, pretraining_corpus,
    render_concept, render_pair, save_prior, save_task, subsample_prior, PriorDataset,
    TaskDataset, TaskItem,
};
pub use templates::{default_templates, parse_templates, PromptTemplate};
