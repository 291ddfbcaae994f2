use thiserror::Error;

/// Failures raised by tensor operations and the differentiation engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: argument {value} outside the domain of the function")]
    Domain { op: &'static str, value: f64 },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not recorded on a graph")]
    UntrackedLoss,
    #[error("parameter `{0}` is not reachable from the loss")]
    Unreachable(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("tensors are recorded on different graphs")]
    GraphMismatch,
    #[error("invalid tensor: {0}")]
    Invalid(String),
}
