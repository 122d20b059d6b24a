//! Quaternion capsule networks.
//!
//! Capsule poses are pure quaternions; each child-to-parent transform is a
//! learned unit rotor applied as `w * u * w*`; parent capsules are formed by
//! EM routing over the rotated votes. The crate carries its own reverse-mode
//! differentiation engine, data loaders and a deterministic training loop.

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod quat;
pub mod real;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
