use std::path::PathBuf;

use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this graph; build a new graph or reset it")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("class {0} already present in the codebooks")]
    DuplicateClass(ClassId),

    #[error("unknown class {0}")]
    UnknownClass(ClassId),

    #[error("label {0} is not in the loss denominator set")]
    LabelOutOfSet(ClassId),

    #[error("empty key set")]
    EmptyKeys,

    #[error("prefix-tuning conditioning was not enabled for these codebooks")]
    ModeNotEnabled,

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("no fitted mixture for class {0}")]
    MissingMog(ClassId),

    #[error("empty sample set")]
    EmptySamples,

    #[error("non-finite sample at row {0}")]
    NonFiniteSample(usize),

    #[error("expected task {expected}, got task {got}")]
    OutOfOrderTask { expected: usize, got: usize },

    #[error("task {0} has no training samples")]
    EmptyTask(usize),

    #[error("no task has been trained yet")]
    Untrained,

    #[error("conflicting variant flags: {0}")]
    ConflictingFlags(String),

    #[error("{0}")]
    Undefined(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps `self` with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
