//! Adversarial exposure attacks against small differentiable image classifiers.
//!
//! The crate provides multiplicative exposure attacks, bracketed exposure
//! fusion (BEF) and convolutional bracketed exposure fusion (CBEF) attacks
//! optimized in Laplacian-pyramid space, additive FGSM-family baselines,
//! a minimal reverse-mode CNN stack to attack, image-quality metrics, and
//! an experiment harness.

pub mod attack;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pyramid;

pub use error::{Error, Result};
pub use image::{Image, LabeledSample};
