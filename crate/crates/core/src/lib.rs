//! Discovery of learning-friendly decoder-target token orderings for
//! arithmetic sequence tasks.
//!
//! The pipeline trains a small decoder-only transformer on a mixture of
//! permuted target sequences, ranks permutations by early validation loss,
//! and refines the winner with a two-stage hierarchical search over the
//! factorial order space. An evolutionary-strategy baseline, a soft-permutation
//! leakage baseline, and attention-entropy diagnostics round out the toolkit.
//!
//! Modules map one-to-one onto the subsystems:
//! - [`taskgen`]: order-sensitive task generators, datasets, vocabulary
//! - [`perm`]: permutation algebra and candidate-set construction
//! - [`model`]: decoder-only transformer with exact analytic gradients
//! - [`trainer`]: AdamW loops — single-order, mixed multi-order, soft-permutation
//! - [`search`]: loss profiling, hierarchical global/local search, ES baseline
//! - [`harness`]: evaluation, attention-sparsity diagnostics, reports

pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod perm;
pub mod rng;
pub mod search;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
