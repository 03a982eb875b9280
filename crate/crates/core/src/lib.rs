//! Area matching with attention descriptors.
//!
//! The pipeline: rectangles and pooled features per image → geometric
//! positional encoding → self/cross attention descriptors → dual-softmax
//! probabilities → mutual-nearest-neighbour selection → containment filtering.
//! Training supervises the probability matrix with a focal classification
//! loss plus a ListMLE ranking loss against IoU ground truth.

// Negated comparisons are how validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod hcrf;
pub mod matcher;
pub mod model;
pub mod optim;
pub mod posenc;
pub mod supervision;
pub mod synth;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
