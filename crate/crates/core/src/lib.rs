//! Group-decomposed knowledge distillation for long-tailed class
//! distributions.
//!
//! The KL distillation loss splits exactly into an inter-group term over
//! head / medium / tail masses and teacher-weighted intra-group terms. The
//! long-tailed objective rebalances the teacher's group masses per batch and
//! weights the intra-group terms uniformly. Around those losses sit a small
//! MLP trainer, synthetic long-tailed data, and an experiment pipeline.

pub mod check;
pub mod data;
pub mod distributions;
pub mod error;
pub mod grouping;
pub mod losses;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
