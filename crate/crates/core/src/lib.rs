//! Hardmax-attention transformer encoder with exact constructive weights.
//!
//! The crate implements a transformer encoder whose attention selects the
//! maximal-score key (no softmax), compiles truncated-power spline functions
//! and hierarchical composition models into explicit sparse weight matrices
//! that the encoder evaluates exactly, and provides the statistical layer
//! (data generation, restricted least squares, plug-in classification,
//! Monte-Carlo excess risk) used by the experiment harness.

pub mod constructor;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod hcm;
pub mod linalg;
pub mod spline;

pub use error::{Error, Result};
