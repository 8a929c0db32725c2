//! Minimal dense numeric kernel.
//!
//! Everything is `f64`. Models are small feed-forward networks split into an
//! encoder `phi` and a predictor `c`, so `h(x) = c(phi(x))`. Training uses
//! mini-batch SGD with classical momentum on a source cross-entropy, an
//! optional weighted pseudo-label cross-entropy and an optional MMD penalty
//! between source and target representations.

mod gradcheck;
mod matrix;
mod mmd;
mod model;
mod objective;
mod train;

pub use gradcheck::{grad_check, GradCheckBatch};
pub use matrix::DenseMatrix;
pub use mmd::{median_bandwidth, mmd2, mmd2_with_grad};
pub use model::{softmax_rows, Activation, Architecture, Layer, MlpModel};
pub use objective::{backprop, objective_value, weighted_ce_loss, Gradients, LayerGrad, MmdTerm};
pub use train::{sgd_fit, sgd_fit_snapshots, Objective, TargetMatching, TrainConfig};
