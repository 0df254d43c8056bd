use std::path::PathBuf;

/// Errors surfaced by the verifier library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("layer {layer}: {detail}")]
    Dimension { layer: usize, detail: String },

    #[error("input has dimension {got}, network expects {expected}")]
    InputDimension { expected: usize, got: usize },

    #[error("layer {layer}: non-finite {what} entry at {index:?}")]
    NonFinite {
        layer: usize,
        what: &'static str,
        index: Vec<usize>,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("invalid specification: {0}")]
    Specification(String),

    #[error("invalid instance: {0}")]
    Instance(String),

    #[error("neuron ({layer}, {index}) is not unstable and cannot be split")]
    StableSplit { layer: usize, index: usize },

    #[error("no unstable neurons left to branch on")]
    NoUnstableNeurons,

    #[error("{count} unstable neurons exceed the enumeration cap of {cap}")]
    PatternCap { count: usize, cap: usize },

    #[error("pattern covers {got} neurons, expected {expected}")]
    PatternLength { expected: usize, got: usize },

    #[error("{0} is not supported by the exact oracle")]
    Unsupported(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
