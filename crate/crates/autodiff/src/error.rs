use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("`{op}`: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("`{op}`: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("`{op}`: empty input")]
    Empty { op: &'static str },

    #[error("singular linear system (pivot {pivot:e} in column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("backward requires a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter/gradient count mismatch: {params} parameters, {grads} gradients")]
    ParamCount { params: usize, grads: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),

    #[error("record name at byte {0} is not valid UTF-8")]
    BadName(usize),

    #[error("duplicate record `{0}`")]
    Duplicate(String),

    #[error("missing record `{0}`")]
    Missing(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}
