//! Weakly supervised fight/anomaly detection over precomputed video snippet
//! features: a feature-magnitude MIL detector, score-threshold snippet mining,
//! and supervised recognition-head training, with frame-level evaluation.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`feature_store`]: on-disk FVEC feature matrices + JSON dataset manifests
//! - [`synthgen`]: synthetic Gaussian-mixture corpora with known ground truth
//! - [`temporal`]: snippet/segment aggregation and frame-score expansion
//! - [`nn`]: scoring head, non-local temporal neck, manual gradients, Adam
//! - [`mil`]: the four-term MIL training objective and loop
//! - [`supervised`]: recognition-head training on trimmed or mined samples
//! - [`mining`]: reliable-positive / hard-negative sample generation
//! - [`eval`]: frame AUC, frame AP, clip accuracy
//! - [`experiment`]: seeded end-to-end recipes and the iteration loop

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feature_store;
pub mod linalg;
pub mod mil;
pub mod mining;
pub mod nn;
pub mod supervised;
pub mod synthgen;
pub mod temporal;

pub use error::{Error, Result};
