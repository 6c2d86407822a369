// Validation uses `!(x > 0.0)` on purpose: the negation also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops here typically touch two structures through one index.
#![allow(clippy::needless_range_loop)]

//! Cross-level instance-group contrastive learning on the CPU.
//!
//! The crate trains a small two-branch encoder with an instance-level NCE
//! loss over a memory bank plus a cross-level loss against batch-local
//! spherical k-means centroids, and evaluates the learned features with
//! kNN, NMI, retrieval, and a label-free tuning score.

pub mod clustering;
pub mod contrast;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod runner;

pub use error::{CldError, Result};
