use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: domain error, {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gate ({mode}, n = {n}) cannot gate tensor of shape {shape:?}")]
    GateDimension {
        mode: &'static str,
        n: usize,
        shape: Vec<usize>,
    },

    #[error("invalid configuration `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    #[error("function is not deterministic: baseline evaluations {first} and {second} differ")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient routing needs a non-empty att group; use standard_train_step for ungated models")]
    EmptyAttGroup,

    #[error("optimizer state mismatch: {0}")]
    StateMismatch(String),

    #[error("non-finite loss ({value}) in {phase}")]
    NonFiniteLoss { phase: &'static str, value: f64 },

    #[error("{path}: row {row}: {msg}")]
    Parse {
        path: String,
        row: usize,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
