//! Dense tensors, a reverse-mode tape, parameters and SGD.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, sgd_step, Sgd};
pub(crate) use params::ByteReader;
pub use params::{ParamId, ParamStore, Parameter, PARAMS_MAGIC, PARAMS_VERSION};
pub(crate) use tape::sigmoid;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("parameter data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
