use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),

    #[error("{op} needs rank >= {min}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        min: usize,
        shape: Vec<usize>,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("{0:?} is not a permutation")]
    Permutation(Vec<usize>),

    #[error("masked reduction over an empty mask")]
    EmptyMask,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by an earlier backward pass")]
    GraphConsumed,

    #[error("{0}")]
    Invalid(String),
}
