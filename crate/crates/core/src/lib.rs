//! Co-occurrence constrained multi-label training.
//!
//! A Pearson-correlation matching penalty is blended with binary
//! cross-entropy, a small MLP head is trained with analytic gradients, and
//! the within-dataset, cross-domain and calibration protocols run on
//! synthetic data with controllable label co-occurrence.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
