//! MissMarple: a twin convolutional network for image-splicing detection.
//!
//! A village model (MM-V) learns from coarse, visibly spliced patches; its
//! third convolution is then frozen and transplanted into the actual-case
//! model (MM-V-A), which trains on finely spliced data. Around the networks
//! sit the patch pipeline, the training harness, image-level evaluation,
//! bounding-box localization, a multiplication-cost analyzer and a
//! synthetic splice generator.

pub mod error;
pub mod eval;
pub mod cli;
pub mod cost;
pub mod localize;
pub mod model;
pub mod patch;
pub mod report;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
