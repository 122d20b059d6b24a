//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! sweeps it in reverse creation order. Heavy network kernels (convolution,
//! batch normalization, rotor votes, EM routing) are recorded as single fused
//! nodes with hand-written reverse rules, each of which is checked against
//! central differences in the test suite.

pub mod batchnorm;
pub mod conv;
pub mod elementwise;
pub mod gradcheck;
pub mod linalg;
pub mod params;
pub mod reduce;
pub mod shape_ops;
pub mod tape;

pub use batchnorm::{BatchStats, BN_EPS};
pub use elementwise::{log_sigmoid, sigmoid};
pub use gradcheck::{compare_with_finite_differences, finite_difference_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamStore, Parameter};
pub use shape_ops::concat;
pub use tape::{Backward, Gradients, Tape, Var};
