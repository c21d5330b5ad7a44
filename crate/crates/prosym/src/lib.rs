//! Probabilistic symmetrization of arbitrary base networks.
//!
//! An unconstrained base function (MLP or token transformer) is wrapped with a
//! learned, input-conditional distribution over group elements so that the
//! wrapped function is invariant or equivariant in expectation. The
//! distribution samples a group element as a deterministic function of the
//! input and outsourced noise, postprocessed into a valid representation
//! (argsort to permutations, Gram-Schmidt to rotations), and is trained
//! end-to-end with the base model through straight-through and relaxation
//! gradients.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`optim`]: dense f64 tensors, reverse-mode AD, Adam
//! - [`groups`]: group representations, their actions, and postprocessors
//! - [`backbones`]: small equivariant networks (GIN, vector-channel net)
//! - [`distribution`]: the learned sampler for each supported group
//! - [`models`]: base functions (MLP, transformer, tokenizers, checkpoints)
//! - [`symmetrize`]: the Monte-Carlo symmetrization engine and losses
//! - [`testkit`]: independent brute-force oracles used by tests
//! - [`data`], [`train`]: dataset generation, training loops, metrics

pub mod backbones;
pub mod data;
pub mod distribution;
pub mod error;
pub mod groups;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod symmetrize;
pub mod tape;
pub mod tensor;
pub mod testkit;
pub mod train;

pub use error::{Error, Result};
