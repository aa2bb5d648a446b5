use thiserror::Error;

use crate::data::DataError;
use crate::evaluator::EvalError;
use crate::model::ConfigError;
use crate::tensor::TensorError;
use crate::trainer::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {loss} at iteration {iteration} (epoch {epoch}, batch seed {batch_seed:#018x})")]
    NonFiniteLoss {
        loss: f32,
        iteration: u64,
        epoch: usize,
        batch_seed: u64,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
