use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("layer {layer} ({kind}): expected input shape {expected}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("tape does not belong to this network or its parameters changed since forward")]
    StaleTape,

    #[error("gradient shape {got:?} does not match network output shape {expected:?}")]
    GradShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("non-finite value in {what} (tensor {index}, element {element})")]
    NonFinite {
        what: &'static str,
        index: usize,
        element: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
