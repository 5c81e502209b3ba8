use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: normalized axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("sequence too short: {frames} input frames leave no output frames after the frontend")]
    SequenceTooShort { frames: usize },

    #[error("adapter slot already occupied: {0}")]
    SlotOccupied(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("infeasible alignment: {frames} frames cannot emit {labels} labels ({required} frames required)")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        required: usize,
    },

    #[error("brute-force oracle instance too large: {paths} paths")]
    OracleSize { paths: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite loss at step {step} (lr {lr:e}, grad_norm {grad_norm:e})")]
    NonFinite { step: usize, lr: f64, grad_norm: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
