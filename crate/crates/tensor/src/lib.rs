//! Deterministic reverse-mode differentiable array engine.
//!
//! A [`Graph`] records forward operations on immutable [`Tensor`] values and
//! replays them in reverse to accumulate gradients. The engine is generic
//! over the scalar type via [`Scalar`]; the default (and the type every
//! downstream consumer uses) is `f64`.

mod error;
mod scalar;
mod tensor;

mod graph;
mod linalg;
mod ops;

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod optim;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use ops::bilinear_resize_raw;
pub use scalar::Scalar;
pub use tensor::{Parameter, Tensor};

/// `f64` engine, the precision the rest of the workspace is built on.
pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Parameter64 = Parameter<f64>;

/// Single-precision variants, available but unused by the segmentation stack.
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;
pub type Parameter32 = Parameter<f32>;
