//! Confidence-preservation audit for knowledge-distilled classifier pairs.
//!
//! Given the logits of a teacher and a student on the same inputs, the
//! toolkit measures how far their confidences drift apart (`sigma`), decides
//! whether that drift stays under a threshold, checks the inequality chain
//! that bounds `sigma` by the distillation loss, and ships a small MLP
//! distillation engine plus grid-search tuner to produce such pairs on
//! synthetic tasks.

// negated float comparisons below deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod data;
pub mod distill;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod rng;
pub mod textfmt;
pub mod tuner;

pub use error::{Error, Result};
