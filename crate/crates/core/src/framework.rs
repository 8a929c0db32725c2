//! The self-training loop.
//!
//! Starting from an empty pseudo-labeled set `R`, every iteration asks the
//! trainer for an ensemble built with the current `R`, selects the points
//! where the ensemble disagrees with `f`, assigns each a pseudo-label that
//! differs from `f(x)`, and replaces `R` with the result. The final `R_X` is
//! the set of flagged errors and `1 - |R_X| / |U_X|` the accuracy estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::ensembles::{EnsembleTrainer, LabelDistribution};
use crate::error::{invalid, Result};
use crate::numkernel::DenseMatrix;
use crate::rng::{stream, TAG_PSEUDO};

/// Suspected errors with pseudo-labels: sorted, unique point indices into
/// `U_X`, each paired with a label different from `f` at that point.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    entries: Vec<(usize, usize)>,
}

impl PseudoLabelSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts the entries by index; duplicate indices are rejected.
    pub fn new(mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_unstable();
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return invalid("duplicate index in pseudo-label set");
        }
        Ok(Self { entries })
    }

    /// Checks the invariants against the `f` predictions it was built for.
    pub fn validate(&self, f_labels: &[usize], num_classes: usize) -> Result<()> {
        for &(j, y) in &self.entries {
            if j >= f_labels.len() {
                return invalid(format!("pseudo-label index {j} out of range"));
            }
            if y >= num_classes {
                return invalid(format!("pseudo-label {y} out of range"));
            }
            if y == f_labels[j] {
                return invalid(format!("pseudo-label at {j} equals f's prediction"));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_of(&self, index: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .ok()
            .map(|p| self.entries[p].1)
    }

    /// The pseudo-labeled points as a training set.
    pub fn materialize(&self, unlabeled: &DenseMatrix, num_classes: usize) -> Result<LabeledDataset> {
        let idx = self.indices();
        if idx.last().is_some_and(|&j| j >= unlabeled.rows()) {
            return invalid("pseudo-label index beyond the unlabeled set");
        }
        LabeledDataset::new(
            unlabeled.select_rows(&idx),
            self.entries.iter().map(|e| e.1).collect(),
            num_classes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Flag points whose agreement with `f` is below `tau`.
    Threshold { tau: f64 },
    /// Flag points whose ensemble majority vote differs from `f`.
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameworkConfig {
    pub iterations: usize,
    pub mode: SelectionMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            mode: SelectionMode::MajorityVote,
            seed: 0,
        }
    }
}

fn check_lengths(votes: &LabelDistribution, f_labels: &[usize]) -> Result<()> {
    if votes.num_points() != f_labels.len() {
        return invalid(format!(
            "ensemble covers {} points but f has {} predictions",
            votes.num_points(),
            f_labels.len()
        ));
    }
    if let Some(&bad) = f_labels.iter().find(|&&y| y >= votes.num_classes()) {
        return invalid(format!("f prediction {bad} out of range"));
    }
    Ok(())
}

/// Per-point fraction of ensemble members that agree with `f`.
pub fn agreement_with_f(votes: &LabelDistribution, f_labels: &[usize]) -> Result<Vec<f64>> {
    check_lengths(votes, f_labels)?;
    Ok(f_labels
        .iter()
        .enumerate()
        .map(|(j, &f)| votes.prob(j, f))
        .collect())
}

/// Flags every point with agreement below `tau`. The pseudo-label is the
/// majority vote when it differs from `f`, otherwise a uniformly random label
/// other than `f(x)` drawn from the stream `(seed, iteration, point)`.
pub fn construct_r_threshold(
    votes: &LabelDistribution,
    f_labels: &[usize],
    tau: f64,
    seed: u64,
    iteration: usize,
) -> Result<PseudoLabelSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return invalid("tau must lie in (0, 1)");
    }
    let k = votes.num_classes();
    if k < 2 {
        return invalid("threshold selection needs at least two classes");
    }
    let ar = agreement_with_f(votes, f_labels)?;
    let mut entries = Vec::new();
    for (j, &a) in ar.iter().enumerate() {
        if a >= tau {
            continue;
        }
        let f = f_labels[j];
        let majority = votes.majority(j);
        let label = if majority != f {
            majority
        } else {
            let r = stream(seed, &[TAG_PSEUDO, iteration as u64, j as u64]).random_range(0..k - 1);
            if r >= f {
                r + 1
            } else {
                r
            }
        };
        entries.push((j, label));
    }
    Ok(PseudoLabelSet { entries })
}

/// Flags every point whose majority vote (lowest label on ties) differs from
/// `f`, using the vote as pseudo-label.
pub fn construct_r_majority(votes: &LabelDistribution, f_labels: &[usize]) -> Result<PseudoLabelSet> {
    check_lengths(votes, f_labels)?;
    let entries = f_labels
        .iter()
        .enumerate()
        .filter_map(|(j, &f)| {
            let m = votes.majority(j);
            (m != f).then_some((j, m))
        })
        .collect();
    Ok(PseudoLabelSet { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub r_size: usize,
    pub indices: Vec<usize>,
    /// Mean agreement between the ensemble and `f` over `U_X`.
    pub mean_agreement: f64,
    /// Points where the majority vote differs from `f`.
    pub majority_disagreements: usize,
    /// Diagnostic only: `R_X` equals the previous iteration's.
    pub r_unchanged: bool,
}

/// Outcome of [`run_self_training`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub iterations: Vec<IterationRecord>,
    pub final_r: PseudoLabelSet,
    pub estimated_accuracy: f64,
    pub num_points: usize,
    pub num_classes: usize,
    pub config: FrameworkConfig,
    /// Ensemble of every iteration.
    pub ensembles: Vec<LabelDistribution>,
    /// Pseudo-labeled set each iteration's ensemble was trained with.
    pub inputs: Vec<PseudoLabelSet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub estimated_accuracy: f64,
    pub iterations: Vec<IterationRecord>,
    pub seed: u64,
    pub config: FrameworkConfig,
}

impl RunResult {
    pub fn final_indices(&self) -> Vec<usize> {
        self.final_r.indices()
    }

    /// Accuracy estimate after the first `t` iterations (`1 <= t <= T`).
    pub fn estimate_at(&self, t: usize) -> f64 {
        estimate_accuracy(&self.iterations[t - 1].indices, self.num_points)
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            estimated_accuracy: self.estimated_accuracy,
            iterations: self.iterations.clone(),
            seed: self.config.seed,
            config: self.config.clone(),
        }
    }
}

pub fn run_self_training(
    trainer: &mut dyn EnsembleTrainer,
    f_labels: &[usize],
    config: &FrameworkConfig,
) -> Result<RunResult> {
    if config.iterations == 0 {
        return invalid("iterations must be at least 1");
    }
    let mut r = PseudoLabelSet::empty();
    let mut iterations = Vec::with_capacity(config.iterations);
    let mut ensembles = Vec::with_capacity(config.iterations);
    let mut inputs = Vec::with_capacity(config.iterations);
    let mut num_classes = 0;
    for t in 0..config.iterations {
        let votes = trainer.ensemble(t, &r)?;
        check_lengths(&votes, f_labels)?;
        num_classes = votes.num_classes();
        let next = match config.mode {
            SelectionMode::Threshold { tau } => construct_r_threshold(&votes, f_labels, tau, config.seed, t)?,
            SelectionMode::MajorityVote => construct_r_majority(&votes, f_labels)?,
        };
        let ar = agreement_with_f(&votes, f_labels)?;
        let indices = next.indices();
        iterations.push(IterationRecord {
            iteration: t + 1,
            r_size: next.len(),
            r_unchanged: t > 0 && indices == r.indices(),
            indices,
            mean_agreement: ar.iter().sum::<f64>() / ar.len().max(1) as f64,
            majority_disagreements: (0..f_labels.len())
                .filter(|&j| votes.majority(j) != f_labels[j])
                .count(),
        });
        ensembles.push(votes);
        inputs.push(std::mem::replace(&mut r, next));
    }
    Ok(RunResult {
        estimated_accuracy: estimate_accuracy(&r.indices(), f_labels.len()),
        final_r: r,
        iterations,
        num_points: f_labels.len(),
        num_classes,
        config: config.clone(),
        ensembles,
        inputs,
    })
}

/// `1 - |R_X| / m`.
pub fn estimate_accuracy(r_x: &[usize], m: usize) -> f64 {
    1.0 - r_x.len() as f64 / m as f64
}

pub fn detect_errors(run: &RunResult) -> Vec<usize> {
    run.final_indices()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{EnsemblePredictions, FixedTrainer};
    use proptest::prelude::*;

    fn votes(members: &[Vec<usize>], k: usize) -> LabelDistribution {
        EnsemblePredictions::from_labels(members, k).unwrap().votes()
    }

    #[test]
    fn agreement_counts() {
        let v = votes(&[vec![1, 0], vec![1, 1], vec![0, 1], vec![1, 1], vec![0, 1]], 2);
        let ar = agreement_with_f(&v, &[1, 0]).unwrap();
        assert_eq!(ar, vec![0.6, 0.2]);
        let same = votes(&[vec![2], vec![2]], 3);
        assert_eq!(agreement_with_f(&same, &[1]).unwrap(), vec![0.0]);
        assert_eq!(agreement_with_f(&same, &[2]).unwrap(), vec![1.0]);
    }

    #[test]
    fn threshold_selection_rules() {
        let f = vec![0, 1, 0];
        let agree = votes(&[f.clone(), f.clone(), f.clone()], 2);
        assert!(construct_r_threshold(&agree, &f, 0.5, 0, 0).unwrap().is_empty());

        // 2 of 5 agree with f = 0 -> flagged with the complement label
        let v = votes(&[vec![0], vec![0], vec![1], vec![1], vec![1]], 2);
        let r = construct_r_threshold(&v, &[0], 0.5, 0, 0).unwrap();
        assert_eq!(r.entries(), &[(0, 1)]);

        // K = 3, majority equals f but agreement 2/5 < 0.6
        let v = votes(&[vec![2], vec![2], vec![1], vec![0], vec![0]], 3);
        let r = construct_r_threshold(&v, &[0], 0.6, 17, 2).unwrap();
        assert_eq!(r.len(), 1);
        let label = r.entries()[0].1;
        assert_ne!(label, 0);
        assert_eq!(r, construct_r_threshold(&v, &[0], 0.6, 17, 2).unwrap());
    }

    #[test]
    fn threshold_needs_two_classes() {
        let v = votes(&[vec![0]], 1);
        assert!(construct_r_threshold(&v, &[0], 0.5, 0, 0).is_err());
    }

    #[test]
    fn majority_selection_rules() {
        // tie 2-2 resolves to label 0 = f, so excluded
        let v = votes(&[vec![0], vec![0], vec![1], vec![1]], 2);
        assert!(construct_r_majority(&v, &[0]).unwrap().is_empty());
        let v = votes(&[vec![2], vec![2], vec![1], vec![1], vec![1]], 3);
        assert_eq!(construct_r_majority(&v, &[2]).unwrap().entries(), &[(0, 1)]);
    }

    #[test]
    fn estimates() {
        assert_eq!(estimate_accuracy(&[], 100), 1.0);
        let r: Vec<usize> = (0..27).collect();
        assert_eq!(estimate_accuracy(&r, 100), 0.73);
        let all: Vec<usize> = (0..100).collect();
        assert_eq!(estimate_accuracy(&all, 100), 0.0);
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut t = FixedTrainer::new(votes(&[vec![0]], 2));
        let cfg = FrameworkConfig {
            iterations: 0,
            ..FrameworkConfig::default()
        };
        assert!(run_self_training(&mut t, &[0], &cfg).is_err());
    }

    #[test]
    fn oracle_ensemble_recovers_true_errors() {
        let truth = vec![0, 1, 2, 1, 0, 2, 1, 1, 0, 2];
        let f = vec![0, 1, 1, 1, 0, 0, 1, 2, 0, 2];
        let mut t = FixedTrainer::new(votes(&vec![truth.clone(); 3], 3));
        let cfg = FrameworkConfig {
            iterations: 1,
            ..FrameworkConfig::default()
        };
        let run = run_self_training(&mut t, &f, &cfg).unwrap();
        assert_eq!(detect_errors(&run), vec![2, 5, 7]);
        assert_eq!(run.estimated_accuracy, 0.7);
    }

    #[test]
    fn ensemble_copying_f_flags_nothing() {
        let f = vec![0, 1, 1, 0];
        let mut t = FixedTrainer::new(votes(&vec![f.clone(); 5], 2));
        let run = run_self_training(&mut t, &f, &FrameworkConfig::default()).unwrap();
        assert_eq!(run.estimated_accuracy, 1.0);
        assert!(run.iterations[1..].iter().all(|r| r.r_unchanged));
        assert_eq!(run.inputs.len(), 5);
    }

    proptest! {
        #[test]
        fn binary_odd_majority_equals_threshold_half(
            labels in prop::collection::vec(prop::collection::vec(0usize..2, 12), 1..4),
            f in prop::collection::vec(0usize..2, 12),
        ) {
            // odd member count: 1, 3, 5 or 7
            let mut members = labels.clone();
            members.extend(labels.iter().skip(1).cloned());
            if members.len() % 2 == 0 { members.pop(); }
            let v = votes(&members, 2);
            let a = construct_r_majority(&v, &f).unwrap();
            let b = construct_r_threshold(&v, &f, 0.5, 3, 0).unwrap();
            prop_assert_eq!(a.indices(), b.indices());
            a.validate(&f, 2).unwrap();
            b.validate(&f, 2).unwrap();
        }

        #[test]
        fn estimate_and_fraction_sum_to_one(r in 0usize..500, extra in 1usize..500) {
            let m = r + extra;
            let idx: Vec<usize> = (0..r).collect();
            prop_assert_eq!(estimate_accuracy(&idx, m) + r as f64 / m as f64, 1.0);
        }
    }
}
