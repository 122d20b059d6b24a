//! Configuration, optimization loop, checkpoints, metrics and diagnostics.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod optimizer;
pub mod evaluate;
pub mod metrics;
pub mod trainer;

pub use config::TrainConfig;
pub use trainer::{train, TrainOptions, TrainSummary};
