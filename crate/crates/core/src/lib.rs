//! Per-class adversarially trained density heads composed into a calibrated
//! generative robust classifier.
//!
//! The toolkit trains one binary head per class to separate clean class-k
//! data from adversarially perturbed other-class data, composes the heads
//! through calibrated Bayes scoring into a multiclass classifier, and ships
//! the attack, evaluation, and interpretability machinery needed to compare
//! it against a softmax adversarial-training baseline:
//!
//! - [`data`] — dataset loading, class partitioning, augmentation
//! - [`nn`] — networks with exact analytic gradients
//! - [`attack`] — norm-ball projection and PGD attack family
//! - [`train`] — adversarial-training losses and the head/baseline trainers
//! - [`classifier`] — head composition and calibration
//! - [`eval`] — accuracy, AUROC, robust evaluation, epsilon sweeps
//! - [`interp`] — generation, counterfactuals, Fréchet distances
//!
//! Experiment configuration and run manifests live in the companion CLI
//! crate, which drives these pieces end to end.

pub mod attack;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod interp;
pub mod nn;
pub mod rng;
pub mod train;

#[doc(hidden)]
pub mod testkit;

pub use error::{Error, Result};
pub use rng::SeedState;

/// Rank-4 image batch (N, C, H, W) with pixel values in [0, 1]; the
/// universal data currency of the toolkit.
pub type ImageBatch = ndarray::Array4<f64>;
