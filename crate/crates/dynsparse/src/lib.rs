//! Always-sparse dynamic sparse training at desk scale.
//!
//! The crate trains small feed-forward networks whose hidden weight matrices
//! are block-sparse, with a periodic prune/re-allocate update of the sparsity
//! pattern. Alongside the training loop it provides exploration metrics
//! (explored degrees of freedom, removed-new ratio), analytic FLOPs
//! accounting and learning-rate scaling rules, and a config-driven CLI runner
//! for the baseline and ablation experiments.

pub mod error;
pub mod flops;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
