use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg} (shape {shape:?})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("tensor data has {len} elements but shape {shape:?} needs {expected}")]
    ElementCount {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("differentiated output must hold exactly one element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not reachable from the differentiated output")]
    Unreachable(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
