use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {num_classes} fine classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint decode error: {0}")]
    CheckpointDecode(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("unknown coarse class `{0}`")]
    UnknownClass(String),

    #[error("unknown group `{0}`")]
    UnknownGroup(String),

    #[error("perturbation is zero; cannot rescale to the target norm")]
    ZeroPerturbation,

    #[error("invalid attack input: {0}")]
    AttackInput(String),

    #[error("insufficient stimulus pool: {}", format_shortfalls(.0))]
    InsufficientPool(Vec<Shortfall>),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// A (condition, class) bucket of the stimulus pool that could not supply enough trials.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shortfall {
    pub condition: String,
    pub class: String,
    pub needed: usize,
    pub available: usize,
}

fn format_shortfalls(s: &[Shortfall]) -> String {
    s.iter()
        .map(|s| {
            format!(
                "{}/{}: need {}, have {}",
                s.condition, s.class, s.needed, s.available
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
