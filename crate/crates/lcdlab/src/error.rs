use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: tensor is not part of a recorded computation graph")]
    DetachedGraph,

    #[error("optimizer: parameter `{name}` has no gradient")]
    MissingGrad { name: String },

    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("class index {c} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { c: usize, num_classes: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: non-finite loss")]
    NonFiniteLoss { step: u64 },

    #[error("benchmark: timer resolution insufficient ({got} ticks per rep, need >= {need})")]
    TimerResolution { got: u64, need: u64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
