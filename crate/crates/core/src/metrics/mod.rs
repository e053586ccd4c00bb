//! Frozen feature space and the alignment / forgetting metrics.

pub mod alignment;
pub mod evaluate;
pub mod extractor;

pub use alignment::{
    image_alignment, image_alignment_features, text_alignment, text_alignment_features, tfr,
    AlignmentMatrix,
};
pub use evaluate::{evaluate_cell, evaluate_sequence, EvalConfig};
pub use extractor::{fit_extractor, retrieval_accuracy, ExtractorConfig, FeatureExtractor};
