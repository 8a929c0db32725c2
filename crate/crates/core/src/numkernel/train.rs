use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::mmd::median_bandwidth;
use super::model::MlpModel;
use super::objective::{backprop, MmdTerm};
use crate::datagen::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, TAG_SHUFFLE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Representation matching against an unlabeled target sample. With no fixed
/// bandwidth the median heuristic is recomputed at the start of every epoch.
#[derive(Debug, Clone, Copy)]
pub struct TargetMatching<'a> {
    pub target: &'a DenseMatrix,
    pub weight: f64,
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub source: &'a LabeledDataset,
    pub pseudo: Option<&'a LabeledDataset>,
    pub pseudo_weight: f64,
    pub matching: Option<TargetMatching<'a>>,
}

impl<'a> Objective<'a> {
    pub fn supervised(source: &'a LabeledDataset) -> Self {
        Self {
            source,
            pseudo: None,
            pseudo_weight: 0.0,
            matching: None,
        }
    }
}

fn chunk(perm: &[usize], j: usize, steps: usize) -> &[usize] {
    let n = perm.len();
    &perm[j * n / steps..(j + 1) * n / steps]
}

fn shuffled(len: usize, seed: u64, epoch: usize, role: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch as u64, role]));
    idx
}

/// Mini-batch SGD with classical momentum.
///
/// Each epoch walks a fresh permutation of the source in `batch_size` steps;
/// the pseudo-labeled set and the matching target are split into the same
/// number of steps so every epoch visits each of them once.
pub fn sgd_fit(model: &MlpModel, objective: &Objective<'_>, config: &TrainConfig) -> Result<MlpModel> {
    let mut last = None;
    fit_loop(model, objective, config, |_, m| last = Some(m.clone()))?;
    Ok(last.expect("at least one epoch"))
}

/// Same run as [`sgd_fit`], returning the model at the end of every epoch.
pub fn sgd_fit_snapshots(
    model: &MlpModel,
    objective: &Objective<'_>,
    config: &TrainConfig,
) -> Result<Vec<MlpModel>> {
    let mut snaps = Vec::with_capacity(config.epochs);
    fit_loop(model, objective, config, |_, m| snaps.push(m.clone()))?;
    Ok(snaps)
}

fn fit_loop(
    model: &MlpModel,
    objective: &Objective<'_>,
    config: &TrainConfig,
    mut on_epoch_end: impl FnMut(usize, &MlpModel),
) -> Result<()> {
    config.validate()?;
    let source = objective.source;
    if source.is_empty() {
        return invalid("cannot train on an empty source set");
    }
    let pseudo = objective.pseudo.filter(|p| !p.is_empty());
    let mut model = model.clone();
    let mut params = model.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let steps = source.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        let src_perm = shuffled(source.len(), config.seed, epoch, 0);
        let ps_perm = pseudo.map(|p| shuffled(p.len(), config.seed, epoch, 1));
        let tgt_perm = objective
            .matching
            .map(|m| shuffled(m.target.rows(), config.seed, epoch, 2));

        let bandwidth = match objective.matching {
            Some(m) => Some(match m.bandwidth {
                Some(bw) => bw,
                None => {
                    let s = source.features().select_rows(chunk(&src_perm, 0, steps));
                    let t = m.target.select_rows(chunk(tgt_perm.as_deref().unwrap_or(&[]), 0, steps));
                    median_bandwidth(&model.represent(&s)?.vstack(&model.represent(&t)?)?)
                }
            }),
            None => None,
        };

        for j in 0..steps {
            let src_batch = source.select(chunk(&src_perm, j, steps));
            let ps_batch = match (pseudo, ps_perm.as_deref()) {
                (Some(p), Some(perm)) => Some(p.select(chunk(perm, j, steps))),
                _ => None,
            };
            let tgt_batch = match (objective.matching, tgt_perm.as_deref()) {
                (Some(m), Some(perm)) => {
                    let rows = chunk(perm, j, steps);
                    (!rows.is_empty()).then(|| m.target.select_rows(rows))
                }
                _ => None,
            };
            let mmd = match (objective.matching, tgt_batch.as_ref(), bandwidth) {
                (Some(m), Some(t), Some(bw)) => Some(MmdTerm {
                    target: t,
                    weight: m.weight,
                    bandwidth: bw,
                }),
                _ => None,
            };
            let (loss, grads) = backprop(&model, &src_batch, ps_batch.as_ref(), objective.pseudo_weight, mmd)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    layer: model.layers().count() - 1,
                    detail: format!("loss diverged in epoch {epoch}"),
                });
            }
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads.flatten()) {
                *v = config.momentum * *v - config.learning_rate * g;
                *p += *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical {
                    layer: model.layers().count() - 1,
                    detail: format!("parameters diverged in epoch {epoch}"),
                });
            }
            model.set_flat_params(&params)?;
        }
        on_epoch_end(epoch, &model);
    }
    Ok(())
}
