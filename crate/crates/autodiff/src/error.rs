use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: input contains NaN")]
    InvalidValue { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: row {row} of the target is not one-hot")]
    Label { op: &'static str, row: usize },
    #[error("backward already ran on this tape; reset it before calling again")]
    AlreadyBackpropagated,
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),
}
