use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("row {row} has norm {norm:e}, too small to normalize")]
    ZeroRow { row: usize, norm: f64 },

    #[error("cache was produced by encoder version {cache}, encoder is at version {encoder}")]
    StaleCache { cache: u64, encoder: u64 },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("class {0} is absent from the batch")]
    ClassAbsent(usize),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("every sample was labeled as noise; eps is too small")]
    AllOutliers,

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },

    #[error("requested {requested} identities per batch but only {available} are available")]
    TooFewIds { requested: usize, available: usize },

    #[error("clustering produced {0} clusters; at least 2 are required")]
    ClusterCollapse(usize),

    #[error("unsupported file header or version: {0}")]
    VersionMismatch(String),

    #[error("no relevant gallery item for query")]
    NoRelevant,

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("loss composition violated at epoch {epoch}: total {total} vs components {components}")]
    LossComposition {
        epoch: usize,
        total: f64,
        components: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ParseError {
            location: location.into(),
            message: message.into(),
        }
    }
}
