//! Unsupervised accuracy estimation and error detection with self-training
//! ensembles.
//!
//! Given a pre-trained classifier `f`, its labeled training set `D` and an
//! unlabeled test set `U_X`, the crate estimates `acc(f, U)` and flags the
//! points `f` mis-classifies. An ensemble of check models is trained, points
//! where the ensemble disagrees with `f` are pseudo-labeled, and the ensemble
//! is retrained with those pseudo-labels for a fixed number of iterations.
//!
//! Module map:
//!
//! - [`numkernel`]: dense matrices, MLP encoder/predictor models, backprop, SGD,
//!   Gaussian-kernel MMD and a finite-difference gradient checker.
//! - [`datagen`]: labeled datasets, synthetic shift generators, CSV I/O.
//! - [`ensembles`]: random-init and representation-matching ensemble trainers.
//! - [`framework`]: the self-training loop and pseudo-label construction.
//! - [`metrics`]: estimation error, F1 and the ensemble condition measurements.
//! - [`theorylab`]: closed-form bound evaluators and a synthetic ensemble
//!   simulator that checks the construction lemma and convergence rate.
//! - [`baselines`]: confidence, MSP and trust-score comparison methods.

pub mod baselines;
pub mod datagen;
pub mod ensembles;
pub mod error;
pub mod framework;
pub mod metrics;
pub mod numkernel;
pub mod rng;
pub mod theorylab;

pub use error::{Error, Result};
