//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The tape ([`Graph`]) executes eagerly: each op computes its value when
//! built and [`Graph::backward`] replays the tape once in reverse. Compute
//! runs in `f32` in production; gradient checks instantiate the same code at
//! `f64` (see [`check`]).

pub mod check;
mod ctx;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use ctx::Ctx;
pub use graph::{Graph, Grads, Var, EXP_SIGMOID_FLOOR, EXP_SIGMOID_POWER, LEAKY_SLOPE};
pub use kernels::{hann, stft_frames, upsample_linear_forward, Pad};
pub use optim::{OptKind, Optimizer, Params};
pub use tensor::{axpy, dot, matmul, matmul_acc, matmul_bt_acc, transpose2, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub(crate) use kernels::stft_mag_forward;
