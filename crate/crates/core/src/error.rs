use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown token(s) in prompt: {}", .0.join(", "))]
    UnknownToken(Vec<String>),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("prompt has no personalized token to attend to")]
    EmptyTarget,

    #[error("personalized token at position {0} has no paired concept token")]
    Pairing(usize),

    #[error("prior batch is empty but its loss weight is non-zero")]
    MissingPrior,

    #[error("task {0} requires a teacher snapshot but none was given")]
    MissingTeacher(usize),

    #[error("task sequencing error: expected task {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("task {0} is already present in the long-term bank")]
    DuplicateTask(usize),

    #[error("integrity error in {location}: {reason}")]
    Integrity { location: String, reason: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("vocabulary coverage error: corpus never uses {}", .0.join(", "))]
    Coverage(Vec<String>),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("alignment matrix is missing entry ({k}, {l})")]
    IncompleteMatrix { k: usize, l: usize },

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn integrity(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            location: location.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
