//! Ensembles of models and the trainers that produce them.
//!
//! An ensemble is the uniform distribution over its members, so every
//! probability "over h" is an empirical fraction out of `N`. Two trainers are
//! provided: [`RiTrainer`] fine-tunes independently initialized members, and
//! [`RmTrainer`] keeps the end-of-epoch checkpoints of a single fine-tuning run
//! regularized with representation matching. Anything implementing
//! [`EnsembleTrainer`] can drive the self-training loop.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{invalid, Result};
use crate::framework::PseudoLabelSet;
use crate::numkernel::{
    sgd_fit, sgd_fit_snapshots, Architecture, DenseMatrix, MlpModel, Objective, TargetMatching, TrainConfig,
};
use crate::rng::{derive_seed, TAG_MEMBER};

const ROW_SUM_TOL: f64 = 1e-9;

fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn check_distribution_rows(probs: &DenseMatrix) -> Result<()> {
    for (j, row) in probs.iter_rows().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) {
            return invalid(format!("negative probability in row {j}"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return invalid(format!("row {j} sums to {s}"));
        }
    }
    Ok(())
}

/// Per-member, per-point predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePredictions {
    num_classes: usize,
    labels: Vec<Vec<usize>>,
    probs: Vec<DenseMatrix>,
}

impl EnsemblePredictions {
    /// One `m x K` probability matrix per member; labels are the argmax with
    /// the lowest index winning ties.
    pub fn from_probs(probs: Vec<DenseMatrix>) -> Result<Self> {
        let Some(first) = probs.first() else {
            return invalid("ensemble needs at least one member");
        };
        let (m, k) = (first.rows(), first.cols());
        if k == 0 {
            return invalid("ensemble needs at least one class");
        }
        for p in &probs {
            if p.rows() != m || p.cols() != k {
                return invalid("members disagree on the prediction shape");
            }
            check_distribution_rows(p)?;
        }
        let labels = probs
            .iter()
            .map(|p| p.iter_rows().map(first_max).collect())
            .collect();
        Ok(Self {
            num_classes: k,
            labels,
            probs,
        })
    }

    /// Hard-label members, represented with one-hot probabilities.
    pub fn from_labels(labels: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        let probs = labels
            .iter()
            .map(|row| {
                let mut data = vec![0.0; row.len() * num_classes];
                for (j, &y) in row.iter().enumerate() {
                    if y >= num_classes {
                        return invalid(format!("label {y} out of range"));
                    }
                    data[j * num_classes + y] = 1.0;
                }
                DenseMatrix::new(row.len(), num_classes, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_probs(probs)
    }

    pub fn num_models(&self) -> usize {
        self.labels.len()
    }

    pub fn num_points(&self) -> usize {
        self.probs[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn probs(&self) -> &[DenseMatrix] {
        &self.probs
    }

    /// Vote fractions `(1/N) #{i : h_i(x) = k}`.
    pub fn votes(&self) -> LabelDistribution {
        let (m, k, n) = (self.num_points(), self.num_classes, self.num_models());
        let mut counts = vec![0usize; m * k];
        for row in &self.labels {
            for (j, &y) in row.iter().enumerate() {
                counts[j * k + y] += 1;
            }
        }
        let data = counts.iter().map(|&c| c as f64 / n as f64).collect();
        LabelDistribution {
            probs: DenseMatrix::new(m, k, data).expect("vote fractions are finite"),
            members: Some(n),
        }
    }

    /// Averaged member probabilities.
    pub fn mean_probs(&self) -> DenseMatrix {
        let (m, k) = (self.num_points(), self.num_classes);
        let mut data = vec![0.0; m * k];
        for p in &self.probs {
            for (d, &v) in data.iter_mut().zip(p.data()) {
                *d += v;
            }
        }
        let n = self.num_models() as f64;
        data.iter_mut().for_each(|d| *d /= n);
        DenseMatrix::new(m, k, data).expect("averaged probabilities are finite")
    }

    /// CSV with header `member,point,label,p0..p{K-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["member".to_string(), "point".to_string(), "label".to_string()];
        header.extend((0..self.num_classes).map(|k| format!("p{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for (i, (labels, probs)) in self.labels.iter().zip(&self.probs).enumerate() {
            for (j, row) in probs.iter_rows().enumerate() {
                let mut rec = vec![i.to_string(), j.to_string(), labels[j].to_string()];
                rec.extend(row.iter().map(|p| p.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Distribution of `h(x)` for `h ~ T` at every point of `U_X`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: DenseMatrix,
    members: Option<usize>,
}

impl LabelDistribution {
    /// Rows must be probability vectors. `members` is `None` for exact
    /// (non-sampled) distributions.
    pub fn new(probs: DenseMatrix, members: Option<usize>) -> Result<Self> {
        if probs.cols() == 0 {
            return invalid("distribution needs at least one class");
        }
        check_distribution_rows(&probs)?;
        Ok(Self { probs, members })
    }

    pub fn num_points(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn members(&self) -> Option<usize> {
        self.members
    }

    pub fn probs(&self) -> &DenseMatrix {
        &self.probs
    }

    pub fn prob(&self, point: usize, label: usize) -> f64 {
        self.probs.get(point, label)
    }

    pub fn row(&self, point: usize) -> &[f64] {
        self.probs.row(point)
    }

    /// Most likely label, lowest index on ties.
    pub fn majority(&self, point: usize) -> usize {
        first_max(self.probs.row(point))
    }

    /// `1 - sum_k Pr[h(x) = k]^2`: the chance two independent draws differ.
    pub fn sigma_x2(&self, point: usize) -> f64 {
        1.0 - self.probs.row(point).iter().map(|p| p * p).sum::<f64>()
    }
}

/// Produces the ensemble for one self-training iteration.
pub trait EnsembleTrainer {
    fn ensemble(&mut self, iteration: usize, pseudo: &PseudoLabelSet) -> Result<LabelDistribution>;

    /// Member-level predictions of the most recent call, when available.
    fn last_predictions(&self) -> Option<&EnsemblePredictions> {
        None
    }
}

/// Returns the same distribution every iteration.
#[derive(Debug, Clone)]
pub struct FixedTrainer {
    votes: LabelDistribution,
}

impl FixedTrainer {
    pub fn new(votes: LabelDistribution) -> Self {
        Self { votes }
    }
}

impl EnsembleTrainer for FixedTrainer {
    fn ensemble(&mut self, _iteration: usize, _pseudo: &PseudoLabelSet) -> Result<LabelDistribution> {
        Ok(self.votes.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Ri,
    Rm,
}

fn default_members() -> usize {
    5
}

fn default_pseudo_weight() -> f64 {
    0.1
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub kind: TrainerKind,
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_pseudo_weight")]
    pub pseudo_weight: f64,
    /// Weight of the representation-matching term (RM only).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Pre-training settings; `train.seed` seeds everything the trainer does.
    pub train: TrainConfig,
    pub architecture: Architecture,
    /// Defaults to `train.learning_rate` for RI and a tenth of it for RM.
    #[serde(default)]
    pub finetune_learning_rate: Option<f64>,
}

impl TrainerSpec {
    pub fn new(kind: TrainerKind, architecture: Architecture, train: TrainConfig) -> Self {
        Self {
            kind,
            members: default_members(),
            pseudo_weight: default_pseudo_weight(),
            alpha: default_alpha(),
            train,
            architecture,
            finetune_learning_rate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return invalid("an ensemble needs at least one member");
        }
        if !(self.pseudo_weight >= 0.0 && self.pseudo_weight.is_finite()) {
            return invalid("pseudo_weight must be finite and non-negative");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return invalid("alpha must be finite and non-negative");
        }
        if let Some(lr) = self.finetune_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return invalid("finetune_learning_rate must be finite and non-negative");
            }
        }
        self.architecture.validate()?;
        self.train.validate()
    }

    pub fn finetune_lr(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(match self.kind {
            TrainerKind::Ri => self.train.learning_rate,
            TrainerKind::Rm => self.train.learning_rate / 10.0,
        })
    }

    fn expect_kind(&self, kind: TrainerKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return invalid(format!("trainer spec is {:?}, expected {kind:?}", self.kind));
        }
        Ok(())
    }
}

fn member_seed(seed: u64, member: usize, role: u64, iteration: usize) -> u64 {
    derive_seed(seed, &[TAG_MEMBER, member as u64, role, iteration as u64])
}

fn pseudo_dataset(pseudo: &PseudoLabelSet, unlabeled: &DenseMatrix, k: usize) -> Result<Option<LabeledDataset>> {
    if pseudo.is_empty() {
        return Ok(None);
    }
    pseudo.materialize(unlabeled, k).map(Some)
}

/// Trains the `N` randomly initialized members on `D` alone. Member `i` only
/// depends on `(D, spec, i)`, so the members can train concurrently.
pub fn pretrain_ri(source: &LabeledDataset, spec: &TrainerSpec) -> Result<Vec<MlpModel>> {
    spec.expect_kind(TrainerKind::Ri)?;
    (0..spec.members)
        .into_par_iter()
        .map(|i| {
            let init = MlpModel::init(&spec.architecture, member_seed(spec.train.seed, i, 0, 0))?;
            let cfg = TrainConfig {
                seed: member_seed(spec.train.seed, i, 1, 0),
                ..spec.train.clone()
            };
            sgd_fit(&init, &Objective::supervised(source), &cfg)
        })
        .collect()
}

/// One epoch of fine-tuning of every pre-trained member on `D` plus the
/// weighted pseudo-labeled set.
pub fn finetune_ri(
    pretrained: &[MlpModel],
    source: &LabeledDataset,
    unlabeled: &DenseMatrix,
    pseudo: &PseudoLabelSet,
    spec: &TrainerSpec,
    iteration: usize,
) -> Result<Vec<MlpModel>> {
    spec.expect_kind(TrainerKind::Ri)?;
    let r = pseudo_dataset(pseudo, unlabeled, spec.architecture.num_classes)?;
    let objective = Objective {
        source,
        pseudo: r.as_ref(),
        pseudo_weight: spec.pseudo_weight,
        matching: None,
    };
    pretrained
        .par_iter()
        .enumerate()
        .map(|(i, model)| {
            let cfg = TrainConfig {
                learning_rate: spec.finetune_lr(),
                epochs: 1,
                seed: member_seed(spec.train.seed, i, 2, iteration),
                ..spec.train.clone()
            };
            sgd_fit(model, &objective, &cfg)
        })
        .collect()
}

/// Pre-training followed by the fine-tuning epoch, without caching.
pub fn train_ri(
    source: &LabeledDataset,
    unlabeled: &DenseMatrix,
    pseudo: &PseudoLabelSet,
    spec: &TrainerSpec,
) -> Result<Vec<MlpModel>> {
    let pre = pretrain_ri(source, spec)?;
    finetune_ri(&pre, source, unlabeled, pseudo, spec, 0)
}

/// Fine-tunes `h0` for `N` epochs and returns the end-of-epoch checkpoints.
pub fn train_rm(
    source: &LabeledDataset,
    unlabeled: &DenseMatrix,
    pseudo: &PseudoLabelSet,
    spec: &TrainerSpec,
    h0: &MlpModel,
    iteration: usize,
) -> Result<Vec<MlpModel>> {
    spec.expect_kind(TrainerKind::Rm)?;
    let r = pseudo_dataset(pseudo, unlabeled, spec.architecture.num_classes)?;
    let objective = Objective {
        source,
        pseudo: r.as_ref(),
        pseudo_weight: spec.pseudo_weight,
        matching: (spec.alpha > 0.0).then_some(TargetMatching {
            target: unlabeled,
            weight: spec.alpha,
            bandwidth: None,
        }),
    };
    let cfg = TrainConfig {
        learning_rate: spec.finetune_lr(),
        epochs: spec.members,
        seed: member_seed(spec.train.seed, 0, 3, iteration),
        ..spec.train.clone()
    };
    sgd_fit_snapshots(h0, &objective, &cfg)
}

pub fn predict_all(members: &[MlpModel], unlabeled: &DenseMatrix) -> Result<EnsemblePredictions> {
    if members.is_empty() {
        return invalid("predict_all needs at least one member");
    }
    let probs = members
        .par_iter()
        .map(|m| m.predict_proba(unlabeled))
        .collect::<Result<Vec<_>>>()?;
    EnsemblePredictions::from_probs(probs)
}

/// RI ensembles; the pre-trained members are computed once and reused.
#[derive(Debug, Clone)]
pub struct RiTrainer {
    source: LabeledDataset,
    unlabeled: DenseMatrix,
    spec: TrainerSpec,
    pretrained: Option<Vec<MlpModel>>,
    last: Option<EnsemblePredictions>,
}

impl RiTrainer {
    pub fn new(source: LabeledDataset, unlabeled: DenseMatrix, spec: TrainerSpec) -> Result<Self> {
        spec.expect_kind(TrainerKind::Ri)?;
        Ok(Self {
            source,
            unlabeled,
            spec,
            pretrained: None,
            last: None,
        })
    }

    pub fn pretrained(&mut self) -> Result<&[MlpModel]> {
        if self.pretrained.is_none() {
            self.pretrained = Some(pretrain_ri(&self.source, &self.spec)?);
        }
        Ok(self.pretrained.as_deref().unwrap_or_default())
    }
}

impl EnsembleTrainer for RiTrainer {
    fn ensemble(&mut self, iteration: usize, pseudo: &PseudoLabelSet) -> Result<LabelDistribution> {
        self.pretrained()?;
        let pre = self.pretrained.as_deref().unwrap_or_default();
        let members = finetune_ri(pre, &self.source, &self.unlabeled, pseudo, &self.spec, iteration)?;
        let preds = predict_all(&members, &self.unlabeled)?;
        let votes = preds.votes();
        self.last = Some(preds);
        Ok(votes)
    }

    fn last_predictions(&self) -> Option<&EnsemblePredictions> {
        self.last.as_ref()
    }
}

/// RM ensembles; every iteration restarts from `h0`.
#[derive(Debug, Clone)]
pub struct RmTrainer {
    source: LabeledDataset,
    unlabeled: DenseMatrix,
    spec: TrainerSpec,
    h0: MlpModel,
    last: Option<EnsemblePredictions>,
}

impl RmTrainer {
    pub fn new(source: LabeledDataset, unlabeled: DenseMatrix, spec: TrainerSpec, h0: MlpModel) -> Result<Self> {
        spec.expect_kind(TrainerKind::Rm)?;
        Ok(Self {
            source,
            unlabeled,
            spec,
            h0,
            last: None,
        })
    }
}

impl EnsembleTrainer for RmTrainer {
    fn ensemble(&mut self, iteration: usize, pseudo: &PseudoLabelSet) -> Result<LabelDistribution> {
        let members = train_rm(&self.source, &self.unlabeled, pseudo, &self.spec, &self.h0, iteration)?;
        let preds = predict_all(&members, &self.unlabeled)?;
        let votes = preds.votes();
        self.last = Some(preds);
        Ok(votes)
    }

    fn last_predictions(&self) -> Option<&EnsemblePredictions> {
        self.last.as_ref()
    }
}
