//! Weighted multiple-instance learning for region-based image classification.
//!
//! An image is treated as a bag of regions. Training bags for positive images
//! are generated around annotated key-content boxes, each region weighted by
//! how much of an annotation it covers; a small convnet scores regions and is
//! trained through a weighted bag likelihood. At test time a fixed
//! eleven-region multi-scale layout is scored with early exit.
//!
//! Module map:
//! - [`geometry`]: boxes, coverage-based degree of interest, clamping
//! - [`imaging`]: images, bilinear crop/resize, grayscale, PNG/PPM
//! - [`baggen`]: positive/negative bag construction and subsampling
//! - [`model`]: the region scorer with exact backward pass and checkpoints
//! - [`milloss`]: sub-bag probabilities, bag loss and its gradient
//! - [`trainer`]: momentum SGD over bags for the weighted objective and baselines
//! - [`synthdata`]: deterministic synthetic corpus and the JSONL manifest
//! - [`infer`]: test-region layout and early-exit classification
//! - [`eval`]: detection rates, ROC, MAP, k-fold splits, report
//! - [`config`]: flat `key=value` configuration files

pub mod baggen;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod infer;
pub mod milloss;
pub mod model;
pub mod seeds;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{BBox, DegreeOfInterest};
pub use imaging::Image;
