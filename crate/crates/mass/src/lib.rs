//! MASS: merge fine-tuned checkpoints into one compact artifact via
//! truncated task singular vectors, and route inputs at inference time by
//! projecting intermediate activations onto per-task subspaces.
//!
//! The pipeline is a one-time fixed merge (redundancy filter, per-task
//! truncated SVD, orthogonalized concatenation) followed by a two-pass
//! adaptive inference step: route on a mid-layer activation, merge only
//! the selected subspaces, classify with the selected tasks' heads.

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod merge;
pub mod router;
pub mod subspace;

pub use error::{Error, Result};
