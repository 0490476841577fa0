//! Parallelized multi-scale attention (PMSA).

mod attention;
mod cost;
mod pooling;

pub use attention::{pmsa_forward, pmsa_on_tape, PmsaOut, PmsaParams, PmsaVars};
pub(crate) use attention::check_heads;
pub use cost::flop_count;
pub use pooling::{
    build_global_context, pool_on_tape, pool_patch, PoolingConfig, PoolingMode, SupernodeSet,
};
