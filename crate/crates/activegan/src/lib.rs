//! Conditional GAN training with an uncertainty-seeking generator term.
//!
//! The core idea: alongside the usual conditional-GAN objectives, the
//! generator is rewarded (through a score-function/policy-gradient estimator)
//! for producing samples that a pre-trained probabilistic classifier finds
//! hard to label. The result is a labeled-sample generator whose output
//! concentrates near decision boundaries, which is where augmentation data
//! is most informative.
//!
//! Layout:
//! - [`numerics`]: tensors, reverse-mode autodiff tape, Adam, seeded RNG
//! - [`models`]: generator, discriminator, latent-density network
//! - [`classifier`]: probabilistic classifiers and grid search
//! - [`uncertainty`]: margin/entropy measures and the reward schedule
//! - [`training`]: the adversarial training loops and replay buffer
//! - [`data`]: synthetic datasets, IDX ingestion, splits, normalization
//! - [`evaluation`]: F-scores, augmentation comparisons, sweeps, projections
//! - [`store`]: a small named-tensor container for checkpoints

pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod numerics;
pub mod store;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
