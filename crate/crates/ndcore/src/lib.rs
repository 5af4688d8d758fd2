//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks trained with gradient reversal.
//!
//! Computation is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the double-precision configuration used everywhere
//! gradients are checked.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use error::{NdError, Result};
pub use graph::{
    entropy, inject_fault, sigmoid, softmax_row, BatchNormStats, Gradients, Graph, Mode, OpKind,
    Var,
};
pub use optim::{sgd_step, LrSchedule};
pub use param::{uniform_fan_in, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(feature = "fault-injection")]
pub use graph::fault;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
