//! Implicitly adaptive importance sampling with importance weighted moment
//! matching and Pareto smoothed diagnostics.

pub mod affine;
pub mod baselines;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod loo;
pub mod models;
pub mod iwmm;
pub mod pareto;
mod serde_util;

pub use affine::{AffineMap, MapKind, MomentOptions, TransformChain, VarianceCentering};
pub use error::{Error, Result};
pub use estimators::{DrawMatrix, FunctionValues, LogWeights};
pub use pareto::{ParetoDiagnostic, DEFAULT_K_THRESHOLD};

/// Derives an independent seed for task `task` from a base seed, so results
/// do not depend on how tasks are scheduled.
pub fn task_seed(base: u64, task: u64) -> u64 {
    let mut z = base ^ task.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
