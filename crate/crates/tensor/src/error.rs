use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {got}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("shape mismatch: expected {want:?}, got {got:?}")]
    Shape { want: Vec<usize>, got: Vec<usize> },
    #[error("expected rank {want}, got shape {shape:?}")]
    Rank { want: usize, shape: Vec<usize> },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("invalid permutation {perm:?} for rank {rank}")]
    Permutation { perm: Vec<usize>, rank: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("{0}")]
    Geometry(String),
    #[error("empty tensor list")]
    Empty,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
