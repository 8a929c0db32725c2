//! Task metrics and evaluation-mode condition measurements.
//!
//! Everything taking `true_labels` belongs to evaluation mode; the production
//! path never calls into those functions. Probabilities over `h ~ T` are read
//! from a [`LabelDistribution`], so measurements work both for trained
//! ensembles (vote fractions) and for exact synthetic distributions.

use serde::{Deserialize, Serialize};

use crate::ensembles::LabelDistribution;
use crate::error::{invalid, Error, Result};
use crate::framework::{PseudoLabelSet, RunResult};
use crate::numkernel::DenseMatrix;

fn check_pair(f_labels: &[usize], true_labels: &[usize]) -> Result<()> {
    if f_labels.len() != true_labels.len() {
        return invalid(format!(
            "{} predictions but {} true labels",
            f_labels.len(),
            true_labels.len()
        ));
    }
    Ok(())
}

fn check_votes(votes: &LabelDistribution, labels: &[usize]) -> Result<()> {
    if votes.num_points() != labels.len() {
        return invalid(format!(
            "ensemble covers {} points, labels cover {}",
            votes.num_points(),
            labels.len()
        ));
    }
    if labels.iter().any(|&y| y >= votes.num_classes()) {
        return invalid("label out of range for the ensemble");
    }
    Ok(())
}

/// Indices where `f` is wrong.
pub fn misclassified(f_labels: &[usize], true_labels: &[usize]) -> Result<Vec<usize>> {
    check_pair(f_labels, true_labels)?;
    Ok((0..f_labels.len()).filter(|&j| f_labels[j] != true_labels[j]).collect())
}

pub fn accuracy(f_labels: &[usize], true_labels: &[usize]) -> Result<f64> {
    check_pair(f_labels, true_labels)?;
    if f_labels.is_empty() {
        return invalid("accuracy of an empty set");
    }
    let hits = f_labels.iter().zip(true_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / f_labels.len() as f64)
}

pub fn estimation_error(estimate: f64, f_labels: &[usize], true_labels: &[usize]) -> Result<f64> {
    Ok((estimate - accuracy(f_labels, true_labels)?).abs())
}

/// F1 of `R_X` as a detector of the misclassified set `W_X`; zero whenever
/// precision or recall is undefined or the sets are disjoint.
pub fn f1_error_detection(r_x: &[usize], w_x: &[usize]) -> f64 {
    let w: std::collections::BTreeSet<usize> = w_x.iter().copied().collect();
    let r: std::collections::BTreeSet<usize> = r_x.iter().copied().collect();
    let hit = r.intersection(&w).count();
    if hit == 0 {
        return 0.0;
    }
    let precision = hit as f64 / r.len() as f64;
    let recall = hit as f64 / w.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `(nu_bar, nu)`: mean and max of `Pr[h(x) != y_x]` over points `f` gets right.
pub fn measure_nu(votes: &LabelDistribution, f_labels: &[usize], true_labels: &[usize]) -> Result<(f64, f64)> {
    check_pair(f_labels, true_labels)?;
    check_votes(votes, true_labels)?;
    let errs: Vec<f64> = (0..f_labels.len())
        .filter(|&j| f_labels[j] == true_labels[j])
        .map(|j| 1.0 - votes.prob(j, true_labels[j]))
        .collect();
    if errs.is_empty() {
        return Err(Error::Undefined("nu needs at least one point where f is correct".into()));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((mean, errs.iter().copied().fold(0.0, f64::max)))
}

/// A measurement that falls back to a default value when its domain is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub undefined: bool,
}

/// Mean agreement with `f` over `R_X`; `0` flagged undefined when `R_X` is empty.
pub fn measure_gamma(votes: &LabelDistribution, f_labels: &[usize], r_x: &[usize]) -> Result<Measurement> {
    check_votes(votes, f_labels)?;
    if r_x.is_empty() {
        return Ok(Measurement {
            value: 0.0,
            undefined: true,
        });
    }
    if r_x.iter().any(|&j| j >= f_labels.len()) {
        return invalid("R_X index out of range");
    }
    let s: f64 = r_x.iter().map(|&j| votes.prob(j, f_labels[j])).sum();
    Ok(Measurement {
        value: s / r_x.len() as f64,
        undefined: false,
    })
}

/// Chance that two independent draws `h1, h2 ~ T` disagree at `point`.
pub fn sigma_x2(votes: &LabelDistribution, point: usize) -> f64 {
    votes.sigma_x2(point)
}

/// Mean `sigma_x^2` over `points`; `None` when `points` is empty.
pub fn measure_sigma2(votes: &LabelDistribution, points: &[usize]) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    Some(points.iter().map(|&j| votes.sigma_x2(j)).sum::<f64>() / points.len() as f64)
}

fn outside(w_x: &[usize], r_x: &[usize]) -> Vec<usize> {
    w_x.iter().copied().filter(|j| r_x.binary_search(j).is_err()).collect()
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Ties closer than this count as meeting a `>=` cut, so that a probability
/// equal to `1 - nu_bar` lands on the same side whatever the summation order.
pub const TIE_TOL: f64 = 1e-12;

/// `G_X`: points of `W_X \ R_X` where the ensemble finds the true label with
/// probability at least `1 - nu_bar`; `B_X` is the rest of `W_X \ R_X`.
pub fn partition_gb(
    votes: &LabelDistribution,
    f_labels: &[usize],
    true_labels: &[usize],
    r_x: &[usize],
    nu_bar: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&nu_bar) {
        return invalid("nu_bar must lie in [0, 1]");
    }
    check_votes(votes, true_labels)?;
    let r = sorted(r_x.to_vec());
    let rest = outside(&misclassified(f_labels, true_labels)?, &r);
    Ok(rest
        .into_iter()
        .partition(|&j| votes.prob(j, true_labels[j]) >= 1.0 - nu_bar - TIE_TOL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealizedQuantities {
    /// Pointwise maximum error on correct points.
    pub nu_max: f64,
    pub s_x: Vec<usize>,
    /// Largest `Pr[h(x) != y~]` over the pseudo-labeled points.
    pub gamma_pseudo_err: f64,
    pub r: f64,
    /// Mean `sigma_x^2` over all of `U_X`.
    pub sigma2_all: f64,
    /// `(sigma2_all - (2 nu - nu^2)(1 - r)) / r`, `None` when `r = 0`.
    pub b: Option<f64>,
}

/// Quantities of the idealized analysis. `r` is computed as
/// `(|W_X \ R_X| - |S_X|) / m`, which equals `(|W_X| - |R_X| - |S_X|) / m`
/// whenever `R_X` only holds misclassified points.
pub fn idealized_quantities(
    votes: &LabelDistribution,
    f_labels: &[usize],
    true_labels: &[usize],
    pseudo: &PseudoLabelSet,
    beta: f64,
) -> Result<IdealizedQuantities> {
    if !(0.0..=1.0).contains(&beta) {
        return invalid("beta must lie in [0, 1]");
    }
    let (_, nu_max) = measure_nu(votes, f_labels, true_labels)?;
    let r_x = pseudo.indices();
    if r_x.last().is_some_and(|&j| j >= f_labels.len()) {
        return invalid("pseudo-label index out of range");
    }
    let rest = outside(&misclassified(f_labels, true_labels)?, &r_x);
    let s_x: Vec<usize> = rest
        .iter()
        .copied()
        .filter(|&j| votes.prob(j, true_labels[j]) >= 1.0 - beta - TIE_TOL)
        .collect();
    let gamma_pseudo_err = pseudo
        .entries()
        .iter()
        .map(|&(j, y)| 1.0 - votes.prob(j, y))
        .fold(0.0, f64::max);
    let m = f_labels.len() as f64;
    let r = (rest.len() - s_x.len()) as f64 / m;
    let all: Vec<usize> = (0..f_labels.len()).collect();
    let sigma2_all = measure_sigma2(votes, &all).unwrap_or(0.0);
    let b = (r > 0.0).then(|| idealized_b(sigma2_all, nu_max, r));
    Ok(IdealizedQuantities {
        nu_max,
        s_x,
        gamma_pseudo_err,
        r,
        sigma2_all,
        b,
    })
}

pub fn idealized_b(sigma2: f64, nu: f64, r: f64) -> f64 {
    (sigma2 - (2.0 * nu - nu * nu) * (1.0 - r)) / r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub acc: f64,
    pub ar: f64,
    pub e_t: f64,
    pub e_f: f64,
    pub cov: f64,
    /// `acc - ar`.
    pub lhs: f64,
    /// `e_T (1 - 2 e_f) - 2 Cov`; exact for two classes, a lower bound otherwise.
    pub rhs: f64,
    pub multiclass_lo: f64,
    pub multiclass_hi: f64,
}

/// Agreement-rate decomposition with `h` uniform over the member rows and
/// `Cov` the covariance of the error indicators of `f` and `h` over `(x, h)`.
pub fn decomposition_check(
    f_labels: &[usize],
    h_labels: &[Vec<usize>],
    true_labels: &[usize],
) -> Result<Decomposition> {
    check_pair(f_labels, true_labels)?;
    if h_labels.is_empty() || f_labels.is_empty() {
        return invalid("decomposition needs members and points");
    }
    if h_labels.iter().any(|h| h.len() != f_labels.len()) {
        return invalid("member length differs from f");
    }
    let n = h_labels.len() as f64;
    let m = f_labels.len() as f64;
    let (mut acc, mut ar, mut e_t, mut joint) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..f_labels.len() {
        let (f, y) = (f_labels[j], true_labels[j]);
        let ef = if f != y { 1.0 } else { 0.0 };
        acc += 1.0 - ef;
        let mut agree = 0.0;
        let mut err = 0.0;
        for h in h_labels {
            agree += if h[j] == f { 1.0 } else { 0.0 };
            err += if h[j] != y { 1.0 } else { 0.0 };
        }
        ar += agree / n;
        e_t += err / n;
        joint += ef * err / n;
    }
    let (acc, ar, e_t, joint) = (acc / m, ar / m, e_t / m, joint / m);
    let e_f = 1.0 - acc;
    let cov = joint - e_t * e_f;
    let rhs = e_t * (1.0 - 2.0 * e_f) - 2.0 * cov;
    Ok(Decomposition {
        acc,
        ar,
        e_t,
        e_f,
        cov,
        lhs: acc - ar,
        rhs,
        multiclass_lo: rhs,
        multiclass_hi: e_t * (1.0 - e_f) - cov,
    })
}

/// `|ar(f, T) - acc(f)|` where the ensemble's confidence in class `k` at a
/// point is row entry `k` of `confidence`.
pub fn calibration_gap(confidence: &DenseMatrix, f_labels: &[usize], true_labels: &[usize]) -> Result<f64> {
    let acc = accuracy(f_labels, true_labels)?;
    if confidence.rows() != f_labels.len() {
        return invalid("confidence rows differ from the number of points");
    }
    if f_labels.iter().any(|&y| y >= confidence.cols()) {
        return invalid("prediction out of range for the confidence matrix");
    }
    let ar = f_labels
        .iter()
        .enumerate()
        .map(|(j, &f)| confidence.get(j, f))
        .sum::<f64>()
        / f_labels.len() as f64;
    Ok((ar - acc).abs())
}

/// Conditions measured on one self-training iteration, with `R` the
/// pseudo-labeled set the iteration's ensemble was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConditions {
    pub iteration: usize,
    pub nu: f64,
    pub nu_bar: f64,
    pub gamma_agree: Option<f64>,
    /// Mean `sigma_x^2` over `B_X`.
    pub sigma2: Option<f64>,
    /// Mean `sigma_x^2` over all of `U_X`.
    pub sigma2_all: f64,
    pub sigma_x2: Vec<f64>,
    pub g_size: usize,
    pub b_size: usize,
    pub r_size: usize,
    pub r_in_w: usize,
    pub w_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionAggregates {
    pub nu_tilde: f64,
    pub nu_max_tilde: f64,
    pub gamma_tilde: f64,
    pub sigma2_l: Option<f64>,
    pub sigma2_all_l: f64,
}

impl ConditionAggregates {
    fn scaled(&self, s: f64) -> Self {
        Self {
            nu_tilde: self.nu_tilde * s,
            nu_max_tilde: self.nu_max_tilde * s,
            gamma_tilde: self.gamma_tilde * s,
            sigma2_l: self.sigma2_l.map(|v| v * s),
            sigma2_all_l: self.sigma2_all_l * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub iterations: Vec<IterationConditions>,
    pub fraction: ConditionAggregates,
    pub percent: ConditionAggregates,
    /// Which averaging each diversity figure uses.
    pub sigma2_basis: String,
}

pub fn iteration_conditions(
    iteration: usize,
    votes: &LabelDistribution,
    f_labels: &[usize],
    true_labels: &[usize],
    r_x: &[usize],
) -> Result<IterationConditions> {
    let (nu_bar, nu) = measure_nu(votes, f_labels, true_labels)?;
    let gamma = measure_gamma(votes, f_labels, r_x)?;
    let (g, b) = partition_gb(votes, f_labels, true_labels, r_x, nu_bar)?;
    let w = misclassified(f_labels, true_labels)?;
    let r = sorted(r_x.to_vec());
    let sigma_x2: Vec<f64> = (0..f_labels.len()).map(|j| votes.sigma_x2(j)).collect();
    Ok(IterationConditions {
        iteration,
        nu,
        nu_bar,
        gamma_agree: (!gamma.undefined).then_some(gamma.value),
        sigma2: measure_sigma2(votes, &b),
        sigma2_all: sigma_x2.iter().sum::<f64>() / sigma_x2.len().max(1) as f64,
        sigma_x2,
        g_size: g.len(),
        b_size: b.len(),
        r_size: r.len(),
        r_in_w: w.len() - outside(&w, &r).len(),
        w_size: w.len(),
    })
}

/// Measures every iteration of a run against the true labels.
pub fn condition_report(run: &RunResult, f_labels: &[usize], true_labels: &[usize]) -> Result<ConditionReport> {
    let iterations = run
        .ensembles
        .iter()
        .zip(&run.inputs)
        .enumerate()
        .map(|(t, (votes, r))| iteration_conditions(t + 1, votes, f_labels, true_labels, &r.indices()))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(iterations))
}

pub fn aggregate(iterations: Vec<IterationConditions>) -> ConditionReport {
    let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
    let fraction = ConditionAggregates {
        nu_tilde: max(&mut iterations.iter().map(|c| c.nu_bar)),
        nu_max_tilde: max(&mut iterations.iter().map(|c| c.nu)),
        gamma_tilde: max(&mut iterations.iter().filter_map(|c| c.gamma_agree)),
        sigma2_l: iterations.iter().filter_map(|c| c.sigma2).reduce(f64::min),
        sigma2_all_l: iterations.iter().map(|c| c.sigma2_all).fold(f64::INFINITY, f64::min),
    };
    ConditionReport {
        percent: fraction.scaled(100.0),
        fraction,
        iterations,
        sigma2_basis: "sigma2 and sigma2_l average over B_X; sigma2_all and sigma2_all_l average over U_X".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::EnsemblePredictions;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn votes(members: &[Vec<usize>], k: usize) -> LabelDistribution {
        EnsemblePredictions::from_labels(members, k).unwrap().votes()
    }

    struct Instance {
        k: usize,
        members: Vec<Vec<usize>>,
        f: Vec<usize>,
        y: Vec<usize>,
    }

    fn random_instance(seed: u64, m: usize, n: usize, k: usize) -> Instance {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let f: Vec<usize> = y
            .iter()
            .map(|&t| if rng.random_bool(0.7) { t } else { rng.random_range(0..k) })
            .collect();
        let members = (0..n)
            .map(|_| {
                y.iter()
                    .zip(&f)
                    .map(|(&t, &fx)| match rng.random_range(0..3) {
                        0 => t,
                        1 => fx,
                        _ => rng.random_range(0..k),
                    })
                    .collect()
            })
            .collect();
        Instance { k, members, f, y }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_error_detection(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(f1_error_detection(&[], &[1]), 0.0);
        assert_eq!(f1_error_detection(&[4], &[1]), 0.0);
        assert!((f1_error_detection(&[2, 3, 4], &[1, 2, 3]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn estimation_error_examples() {
        assert_eq!(estimation_error(0.75, &[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.0);
        assert!((estimation_error(0.9, &[1, 1], &[1, 1]).unwrap() - 0.1).abs() < 1e-15);
        let inst = random_instance(3, 200, 1, 4);
        let mut hits = 0usize;
        for j in 0..200 {
            if inst.f[j] == inst.y[j] {
                hits += 1;
            }
        }
        let oracle = (0.5f64 - hits as f64 / 200.0).abs();
        assert!((estimation_error(0.5, &inst.f, &inst.y).unwrap() - oracle).abs() <= 1e-15);
    }

    #[test]
    fn nu_examples() {
        let y = vec![0, 1, 1];
        assert_eq!(measure_nu(&votes(&vec![y.clone(); 3], 2), &y, &y).unwrap(), (0.0, 0.0));
        // f correct on points 0 and 1 with ensemble errors 0.2 and 0.4
        let v = votes(
            &[vec![1, 0, 0], vec![0, 0, 0], vec![0, 1, 0], vec![0, 1, 0], vec![0, 1, 0]],
            2,
        );
        let (mean, max) = measure_nu(&v, &[0, 1, 1], &[0, 1, 0]).unwrap();
        assert!((mean - 0.3).abs() < 1e-15 && (max - 0.4).abs() < 1e-15);
        assert!(matches!(measure_nu(&v, &[1, 0, 1], &[0, 1, 0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn gamma_examples() {
        let v = votes(&[vec![1, 0]], 2);
        assert_eq!(measure_gamma(&v, &[0, 1], &[0, 1]).unwrap().value, 0.0);
        let v = votes(&[vec![1], vec![0], vec![0], vec![0], vec![0]], 2);
        assert!((measure_gamma(&v, &[1], &[0]).unwrap().value - 0.2).abs() < 1e-15);
        assert!(measure_gamma(&v, &[1], &[]).unwrap().undefined);
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_x2(&votes(&vec![vec![1]; 3], 2), 0), 0.0);
        assert_eq!(sigma_x2(&votes(&[vec![0], vec![0], vec![1], vec![1]], 2), 0), 0.5);
        let uniform: Vec<Vec<usize>> = (0..10).map(|k| vec![k]).collect();
        assert!((sigma_x2(&votes(&uniform, 10), 0) - 0.9).abs() < 1e-15);
        assert_eq!(measure_sigma2(&votes(&uniform, 10), &[]), None);
    }

    #[test]
    fn partition_examples() {
        let y = vec![0, 1, 2, 0, 1];
        let f = vec![0, 2, 1, 1, 1];
        let (g, b) = partition_gb(&votes(&vec![y.clone(); 3], 3), &f, &y, &[3], 0.1).unwrap();
        assert_eq!((g, b), (vec![1, 2], vec![]));
        let (g, b) = partition_gb(&votes(&vec![f.clone(); 3], 3), &f, &y, &[3], 0.1).unwrap();
        assert_eq!((g, b), (vec![], vec![1, 2]));
    }

    #[test]
    fn idealized_examples() {
        let y = vec![0, 1, 2, 0, 1, 2];
        let f = vec![0, 2, 2, 1, 1, 0];
        let q = idealized_quantities(&votes(&vec![y.clone(); 2], 3), &f, &y, &PseudoLabelSet::empty(), 0.0).unwrap();
        assert_eq!(q.s_x, vec![1, 3, 5]);
        assert_eq!((q.gamma_pseudo_err, q.r, q.b), (0.0, 0.0, None));
        assert!((idealized_b(0.6, 0.1, 0.5) - 1.01).abs() < 1e-12);
    }

    #[test]
    fn idealized_hand_instance() {
        // 6 points, 4 members, K = 3
        let y = vec![0, 1, 2, 0, 1, 2];
        let f = vec![0, 1, 0, 2, 0, 1];
        let members = vec![
            vec![0, 1, 2, 1, 0, 1],
            vec![0, 0, 2, 1, 1, 1],
            vec![1, 1, 0, 1, 2, 0],
            vec![0, 1, 2, 0, 1, 2],
        ];
        let v = votes(&members, 3);
        let r = PseudoLabelSet::new(vec![(2, 2), (3, 1)]).unwrap();
        let q = idealized_quantities(&v, &f, &y, &r, 0.5).unwrap();
        // correct points 0, 1: errors 1/4, 1/4
        assert!((q.nu_max - 0.25).abs() < 1e-15);
        // W = {2,3,4,5}; outside R: {4, 5}; Pr[h=y] = 2/4 at 4 and 1/4 at 5
        assert_eq!(q.s_x, vec![4]);
        assert!((q.r - 1.0 / 6.0).abs() < 1e-15);
        // pseudo errors: point 2 label 2 -> 1/4, point 3 label 1 -> 1/4
        assert!((q.gamma_pseudo_err - 0.25).abs() < 1e-15);
        let p = |c: [f64; 3]| 1.0 - c.iter().map(|x| (x / 4.0) * (x / 4.0)).sum::<f64>();
        let s_all = (p([3.0, 1.0, 0.0])
            + p([1.0, 3.0, 0.0])
            + p([1.0, 0.0, 3.0])
            + p([1.0, 3.0, 0.0])
            + p([1.0, 2.0, 1.0])
            + p([1.0, 2.0, 1.0]))
            / 6.0;
        assert!((q.sigma2_all - s_all).abs() < 1e-15);
        let r6 = 1.0 / 6.0;
        let expected_b = (s_all - (0.5 - 0.0625) * (1.0 - r6)) / r6;
        assert!((q.b.unwrap() - expected_b).abs() < 1e-12);
    }

    #[test]
    fn decomposition_table() {
        // points x2-, x1-, x1+, x2+ with - = 0 and + = 1
        let y = vec![0, 0, 1, 1];
        let f = vec![0, 1, 0, 1];
        let h = vec![vec![0, 1, 1, 0]];
        let d = decomposition_check(&f, &h, &y).unwrap();
        assert_eq!((d.acc, d.ar, d.e_t), (0.5, 0.5, 0.5));
        assert_eq!(d.cov + d.e_t * d.e_f, 0.25);
        assert_eq!((d.lhs, d.rhs), (0.0, 0.0));
        let d = decomposition_check(&f, std::slice::from_ref(&y), &y).unwrap();
        assert_eq!((d.lhs, d.rhs), (0.0, 0.0));
    }

    #[test]
    fn decomposition_binary_identity_n1000() {
        for seed in 0..5 {
            let inst = random_instance(seed, 1000, 5, 2);
            let d = decomposition_check(&inst.f, &inst.members, &inst.y).unwrap();
            assert!((d.lhs - d.rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_examples() {
        let y = vec![0, 2, 1, 1];
        let f = vec![0, 1, 1, 2];
        let mut onehot = vec![0.0; 12];
        for (j, &t) in y.iter().enumerate() {
            onehot[j * 3 + t] = 1.0;
        }
        let c = DenseMatrix::new(4, 3, onehot).unwrap();
        assert_eq!(calibration_gap(&c, &f, &y).unwrap(), 0.0);
        // ensemble confident in f everywhere: ar = 1, acc = 0.5
        let mut conf_f = vec![0.0; 12];
        for (j, &p) in f.iter().enumerate() {
            conf_f[j * 3 + p] = 1.0;
        }
        let c = DenseMatrix::new(4, 3, conf_f).unwrap();
        assert_eq!(calibration_gap(&c, &f, &y).unwrap(), 0.5);
    }

    #[test]
    fn calibration_monte_carlo() {
        let m = 10_000;
        let k = 3;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut within = 0;
        let trials = 200;
        for _ in 0..trials {
            let mut data = Vec::with_capacity(m * k);
            let mut y = Vec::with_capacity(m);
            let mut f = Vec::with_capacity(m);
            for _ in 0..m {
                let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = w.iter().sum();
                let p: Vec<f64> = w.iter().map(|x| x / s).collect();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut label = k - 1;
                for (c, &pc) in p.iter().enumerate() {
                    acc += pc;
                    if u < acc {
                        label = c;
                        break;
                    }
                }
                y.push(label);
                f.push(rng.random_range(0..k));
                data.extend(p);
            }
            let c = DenseMatrix::new(m, k, data).unwrap();
            if calibration_gap(&c, &f, &y).unwrap() <= 3.0 / (m as f64).sqrt() {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.99 * trials as f64, "{within}/{trials}");
    }

    #[test]
    fn report_aggregates() {
        let inst = random_instance(5, 40, 5, 3);
        let v = votes(&inst.members, 3);
        let a = iteration_conditions(1, &v, &inst.f, &inst.y, &[]).unwrap();
        let b = iteration_conditions(2, &v, &inst.f, &inst.y, &[0, 1, 2]).unwrap();
        let rep = aggregate(vec![a.clone(), b.clone()]);
        assert_eq!(rep.fraction.gamma_tilde, b.gamma_agree.unwrap());
        assert_eq!(rep.fraction.nu_tilde, a.nu_bar.max(b.nu_bar));
        assert!((rep.percent.nu_tilde - 100.0 * rep.fraction.nu_tilde).abs() < 1e-12);
        for c in [&a, &b] {
            assert_eq!(c.g_size + c.b_size + c.r_in_w, c.w_size);
        }
    }

    proptest! {
        #[test]
        fn measurements_match_brute_force(seed in 0u64..10_000, m in 2usize..50, n in 1usize..8, k in 2usize..5) {
            let inst = random_instance(seed, m, n, k);
            let v = votes(&inst.members, inst.k);
            let nf = n as f64;
            // pair loop with replacement
            for j in 0..m {
                let mut diff = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        if inst.members[a][j] != inst.members[b][j] { diff += 1.0; }
                    }
                }
                prop_assert!((sigma_x2(&v, j) - diff / (nf * nf)).abs() < 1e-12);
            }
            let correct: Vec<usize> = (0..m).filter(|&j| inst.f[j] == inst.y[j]).collect();
            if !correct.is_empty() {
                let mut per = Vec::new();
                for &j in &correct {
                    let mut e = 0.0;
                    for h in &inst.members { if h[j] != inst.y[j] { e += 1.0; } }
                    per.push(e / nf);
                }
                let mean = per.iter().sum::<f64>() / per.len() as f64;
                let max = per.iter().cloned().fold(0.0, f64::max);
                let (nb, nmax) = measure_nu(&v, &inst.f, &inst.y).unwrap();
                prop_assert!((nb - mean).abs() < 1e-12 && (nmax - max).abs() < 1e-12);

                let r_x: Vec<usize> = (0..m).filter(|j| j % 3 == 0).collect();
                let mut g = Vec::new();
                let mut b = Vec::new();
                for j in 0..m {
                    if inst.f[j] == inst.y[j] || r_x.contains(&j) { continue; }
                    let mut hit = 0.0;
                    for h in &inst.members { if h[j] == inst.y[j] { hit += 1.0; } }
                    if hit / nf >= 1.0 - nb - 1e-12 { g.push(j) } else { b.push(j) }
                }
                prop_assert_eq!(partition_gb(&v, &inst.f, &inst.y, &r_x, nb).unwrap(), (g, b));
            }
            let r_x: Vec<usize> = (0..m).step_by(2).collect();
            let mut s = 0.0;
            for &j in &r_x {
                let mut a = 0.0;
                for h in &inst.members { if h[j] == inst.f[j] { a += 1.0; } }
                s += a / nf;
            }
            let g = measure_gamma(&v, &inst.f, &r_x).unwrap();
            prop_assert!((g.value - s / r_x.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn agreement_and_diversity_bounds(seed in 0u64..10_000, n in 1usize..9, k in 2usize..6) {
            let inst = random_instance(seed, 30, n, k);
            let v = votes(&inst.members, k);
            for j in 0..30 {
                let s = sigma_x2(&v, j);
                prop_assert!(s >= -1e-15 && s <= 1.0 - 1.0 / k as f64 + 1e-12);
                prop_assert!(v.prob(j, inst.f[j]) <= (1.0 - s).sqrt() + 1e-12);
            }
        }

        #[test]
        fn multiclass_bracket(seed in 0u64..10_000, k in 2usize..6) {
            let inst = random_instance(seed, 60, 5, k);
            let d = decomposition_check(&inst.f, &inst.members, &inst.y).unwrap();
            prop_assert!(d.multiclass_lo <= d.lhs + 1e-12 && d.lhs <= d.multiclass_hi + 1e-12);
            if k == 2 { prop_assert!((d.lhs - d.rhs).abs() < 1e-12); }
        }
    }
}
