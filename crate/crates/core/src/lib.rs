//! Flow-guided deformable video attention for semi-supervised mask
//! propagation, built on a small reverse-mode tensor engine.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). Models are
//! stored and run in `f32`; gradient checks run the same code in `f64`.

pub mod adva;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
