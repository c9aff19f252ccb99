//! Differentiable stereo visual localization.
//!
//! The crate covers the whole learned-feature pipeline: a small
//! encoder-decoder predicts per-pixel descriptors, scores and keypoint
//! logits; keypoints are matched densely with a temperature-weighted ZNCC
//! softmax; matches are lifted to 3D with the stereo camera model; a
//! weighted SVD alignment recovers the relative pose. Every step is recorded
//! on a reverse-mode [`diff::Tape`] so the pose and keypoint losses can be
//! trained end to end. The [`synth`] and [`vtr`] modules provide a synthetic
//! teach-and-repeat harness to evaluate the learned features.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod error;
pub mod features;
pub mod estimator;
pub mod geometry;
pub mod image;
pub mod matching;
pub mod seed;
pub mod synth;
pub mod training;
pub mod vtr;

pub use error::{Error, Result};
