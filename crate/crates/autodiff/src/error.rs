use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite forward value in node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error(
        "gradient of intermediate node {0} was not retained; run backward with \
         BackwardMode::RetainIntermediates"
    )]
    IntermediateNotRetained(usize),

    #[error("graph builder is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Failure raised by code layered on top of the graph, such as a model
    /// inside a [`crate::GraphBuilder`].
    #[error("{0}")]
    External(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
