//! Small N-dimensional tensor engine with reverse-mode automatic differentiation.
//!
//! Values are recorded on a [`Tape`] as operations run; [`Tape::backward`]
//! replays the recorded nodes in reverse to produce gradients for every leaf.
//! The engine is generic over [`Element`] so that the same operator code runs
//! in `f32` for training and in `f64` for finite-difference verification.

mod element;
mod error;
mod fpenv;
pub mod gradcheck;
mod ops;
mod param;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use fpenv::FlushSubnormals;
pub use ops::activation::Activation;
pub use ops::conv::Conv2dOptions;
pub use ops::custom::CustomOp;
pub use ops::norm::{BatchNormStats, NORM_EPS};
pub use ops::pool::{Pool2dOptions, PoolMode};
pub use param::{Param, ParamId, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
