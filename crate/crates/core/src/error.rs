use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention value {value} at frame {frame} is outside [0, 1]")]
    AttentionRange { frame: usize, value: f64 },
    #[error("{which} pooling weights sum to {sum}, below the degeneracy threshold")]
    PoolingDegenerate { which: &'static str, sum: f64 },
    #[error("temporal pyramid needs at least 4 frames, got {0}")]
    Pyramid(usize),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
