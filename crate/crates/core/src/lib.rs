//! Task-aware low-rank adaptation at desk scale.
//!
//! The crate initializes low-rank adapters from the SVD of `W₀·C` (the
//! pretrained weight times the layer's input covariance), freezes the
//! projection `A` and trains only `B`. Ranks and scaling factors are
//! redistributed across layers by a magnitude-times-gradient importance
//! score measured during a short calibration pass. An analysis module
//! checks the underlying least-squares theory (optimal `B`, the trace
//! objective and its eigenvalue bound) against brute-force evaluation.
//!
//! Module map:
//! - [`linalg`]: matrices, Jacobi SVD/eigendecomposition, PSD roots.
//! - [`model`]: a small feed-forward network with exact gradients.
//! - [`adapter`]: adapter state, initialization variants, merging.
//! - [`calibrate`]: importance/covariance pass and budget allocation.
//! - [`train`]: SGD/AdamW and the training loops.
//! - [`analysis`]: target matrices, objective, alignment and stability.
//! - [`harness`]: tasks, configs, persistence and the ablation matrix.

pub mod adapter;
pub mod analysis;
pub mod calibrate;
mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod train;

pub use error::{LabError, Result};
pub use linalg::Matrix;

/// Default seed for every random draw.
pub const DEFAULT_SEED: u64 = 42;

/// Default Tikhonov damping for covariance roots.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Deterministic RNG used throughout the crate.
pub type LabRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> LabRng {
    use rand::SeedableRng;
    LabRng::seed_from_u64(seed)
}
