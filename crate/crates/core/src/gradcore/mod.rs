//! Dense tensors with reverse-mode differentiation, parameter storage and the optimizer.

mod conv;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use conv::{NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use gradcheck::{grad_check, GradCheck};
pub use optim::SgdNesterov;
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tape::{Grads, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
