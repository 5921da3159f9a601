use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask is in {0} mode; operation requires a deterministic or frozen-binary mask")]
    StochasticMask(&'static str),

    #[error("mask is not binary; freeze it before finalizing")]
    NonBinaryMask,

    #[error("k-means needs at least k points (k = {k}, n = {n})")]
    TooFewPoints { k: usize, n: usize },

    #[error("group (y = {class}, {attribute} = {value}) is empty")]
    EmptyGroup {
        attribute: String,
        class: usize,
        value: usize,
    },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("attribute `{0}` has no registered intervention")]
    NoIntervention(String),

    #[error("class {class}: {detail}")]
    TaskData { class: usize, detail: String },

    #[error("contrastive sampling failed: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
