//! Driving-style classification from vehicle signals: synthetic traces,
//! weak annotation, recurrence plots, neural classifiers and active learning.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod annotator;
pub mod error;
pub mod eval;
pub mod models;
pub mod recurrence;
pub mod seeds;
pub mod signal;
pub mod synthgen;

pub use error::{Error, Result};
