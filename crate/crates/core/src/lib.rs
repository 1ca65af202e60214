//! Desk-scale one-class novelty detection.
//!
//! The crate trains a small encoder with a contrastive objective plus a
//! binary inlier/augmented classifier, selects which hard augmentations to
//! use automatically (divergence of 1-D t-SNE density estimates), and scores
//! test samples with a combined embedding-similarity + classifier score.
//! A companion `theory` module evaluates the adversarial-error expressions
//! for the Gaussian model that motivates the combined score.
//!
//! Everything is deterministic: all randomness flows through the
//! counter-based [`numcore::Rng`], floating point is f32 storage with f64
//! accumulation in reductions, and no threads are spawned.

pub mod error;
pub mod numcore;

pub mod augment;
pub mod autoaugood;
pub mod evaluation;
pub mod network;
pub mod objective;
pub mod pipeline;
pub mod scoring;
pub mod theory;

pub use error::{Error, Result};
