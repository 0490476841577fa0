//! Multi-scale patch transformer (MSPT) for operator learning on point
//! clouds: ball-tree patching, parallelized multi-scale attention, the block
//! stack, training, evaluation metrics, and a cost-model benchmark.

pub mod balltree;
pub mod bench;
pub mod data;
pub mod error;
pub mod numerics;
pub mod metrics;
pub mod model;
pub mod pmsa;
pub mod training;

pub use error::{Error, Result};
