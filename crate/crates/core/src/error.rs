use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category {0:02} was removed from the taxonomy (combined-space retrieve value)")]
    RemovedCategory(i32),
    #[error("invalid task label: {0}")]
    InvalidLabel(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("line {line}: timestamp {time} is earlier than the previous frame ({previous}) in trial {trial}")]
    NonMonotonicTime {
        line: u64,
        trial: String,
        previous: f64,
        time: f64,
    },
    #[error("trial {0} has no frames")]
    EmptyTrial(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{0}` already exists")]
    DuplicateFeature(String),
    #[error("invalid golden-rule predicate `{predicate}`: {message}")]
    InvalidPredicate { predicate: String, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("input length {length} is shorter than the filter length {filter}")]
    InputTooShort { length: usize, filter: usize },
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("linear system is not positive definite")]
    SingularSystem,
    #[error("class {class} has {count} samples, fewer than the {folds} folds")]
    ClassTooSmall {
        class: i32,
        count: usize,
        folds: usize,
    },
    #[error("unknown class {0}")]
    UnknownClass(i32),
    #[error("no features remain after removing group {0}")]
    EmptyFeatureSet(String),
    #[error("trace has {length} frames, fewer than the {required} needed for the first window")]
    TraceTooShort { length: usize, required: usize },
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True when the failure came from the filesystem rather than from the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            Error::Json(e) => e.is_io(),
            Error::Image(image::ImageError::IoError(_)) => true,
            _ => false,
        }
    }
}
