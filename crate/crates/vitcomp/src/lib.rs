//! ViT compression toolkit.
//!
//! Builds vision transformers at desk scale, plans paired token merges
//! against a FLOPs budget, fine-tunes with compactors under a group-lasso
//! schedule, selects prunable channels under head and attention consistency
//! constraints, folds compactors into weights, and exports structurally
//! pruned checkpoints. A MAC-level FLOPs audit backs both the merge planner
//! and the channel selector.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod merge;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod trainer;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
