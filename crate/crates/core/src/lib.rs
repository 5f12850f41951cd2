//! Distribution distillation loss for hard-sample embedding learning.
//!
//! The crate turns cosine similarities of positive and hard-negative pairs
//! into differentiable soft histograms, pulls the hard-domain ("student")
//! histograms toward the easy-domain ("teacher") ones with a KL term, keeps
//! the positive/negative expectations apart with an order term, and trains a
//! small encoder end to end together with an additive angular-margin softmax.

pub mod distribution;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pairing;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{DdlError, Result};
