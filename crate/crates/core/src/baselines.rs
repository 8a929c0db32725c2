//! Comparison methods: confidence averages and score-threshold detectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::EnsemblePredictions;
use crate::error::{invalid, Result};
use crate::numkernel::DenseMatrix;

/// Score returned by [`trust_score`] when the predicted class has a
/// neighbor at distance zero.
pub const TRUST_SCORE_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutput {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimated_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flagged_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl BaselineOutput {
    pub fn estimate(method: &str, value: f64) -> Self {
        Self {
            method: method.into(),
            estimated_accuracy: Some(value),
            flagged_indices: None,
            threshold: None,
            note: None,
        }
    }

    /// Flags at `threshold`; the implied accuracy estimate is the unflagged
    /// fraction of `m` points.
    pub fn detection(method: &str, flagged: Vec<usize>, threshold: f64, m: usize) -> Self {
        Self {
            method: method.into(),
            estimated_accuracy: Some(1.0 - flagged.len() as f64 / m as f64),
            flagged_indices: Some(flagged),
            threshold: Some(threshold),
            note: None,
        }
    }
}

/// Largest entry of every row.
pub fn max_probs(probs: &DenseMatrix) -> Vec<f64> {
    probs
        .iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Mean of the per-point maximum probability.
pub fn avg_conf(probs: &DenseMatrix) -> Result<f64> {
    if probs.rows() == 0 {
        return invalid("avg_conf of no points");
    }
    Ok(max_probs(probs).iter().sum::<f64>() / probs.rows() as f64)
}

/// [`avg_conf`] of the member-averaged probabilities.
pub fn ens_avg_conf(ensemble: &EnsemblePredictions) -> Result<f64> {
    avg_conf(&ensemble.mean_probs())
}

/// Threshold flagging (with `score < threshold`) the `ceil(rate n)` lowest
/// scores, plus every score tied with the last of them.
pub fn calibrate_threshold(scores: &[f64], rate: f64) -> Result<f64> {
    if scores.is_empty() {
        return invalid("cannot calibrate on an empty score set");
    }
    if !(0.0..=1.0).contains(&rate) {
        return invalid("rate must lie in [0, 1]");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("NaN score");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((rate * scores.len() as f64).ceil() as usize).min(scores.len());
    Ok(if k == 0 {
        sorted[0].next_down()
    } else {
        sorted[k - 1].next_up()
    })
}

/// Indices with `score < threshold`.
pub fn flag_below(scores: &[f64], threshold: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&j| scores[j] < threshold).collect()
}

/// Flags points whose maximum softmax probability is below `threshold`.
pub fn msp_detect(probs: &DenseMatrix, threshold: f64) -> Result<Vec<usize>> {
    if !threshold.is_finite() {
        return invalid("threshold must be finite");
    }
    Ok(flag_below(&max_probs(probs), threshold))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ratio of the distance to the nearest other class over the distance to the
/// predicted class, each measured to the `k`-th nearest training point of
/// that class (`k` is clipped to the class size).
pub fn trust_score(
    train: &DenseMatrix,
    train_labels: &[usize],
    num_classes: usize,
    test: &DenseMatrix,
    f_labels: &[usize],
    k: usize,
) -> Result<Vec<f64>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if train.rows() != train_labels.len() || test.rows() != f_labels.len() {
        return invalid("feature and label counts differ");
    }
    if train.cols() != test.cols() {
        return invalid("train and test dimensions differ");
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in train_labels.iter().enumerate() {
        if y >= num_classes {
            return invalid(format!("train label {y} out of range"));
        }
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return invalid(format!("class {c} is absent from the training set"));
    }
    if let Some(&bad) = f_labels.iter().find(|&&y| y >= num_classes) {
        return invalid(format!("prediction {bad} out of range"));
    }
    Ok((0..test.rows())
        .into_par_iter()
        .map(|j| {
            let x = test.row(j);
            let kth: Vec<f64> = by_class
                .iter()
                .map(|members| {
                    let mut d: Vec<f64> = members.iter().map(|&i| distance(x, train.row(i))).collect();
                    let kk = k.min(d.len()) - 1;
                    *d.select_nth_unstable_by(kk, f64::total_cmp).1
                })
                .collect();
            let own = kth[f_labels[j]];
            let other = (0..num_classes)
                .filter(|&c| c != f_labels[j])
                .map(|c| kth[c])
                .fold(f64::INFINITY, f64::min);
            if own == 0.0 {
                TRUST_SCORE_CAP
            } else {
                (other / own).min(TRUST_SCORE_CAP)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn avg_conf_examples() {
        assert_eq!(avg_conf(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 1.0);
        assert_eq!(avg_conf(&m(&[&[0.25; 4], &[0.25; 4]])).unwrap(), 0.25);
        let p = m(&[&[0.2, 0.5, 0.3], &[0.7, 0.1, 0.2], &[0.3, 0.3, 0.4]]);
        let mut s = 0.0;
        for r in p.iter_rows() {
            let mut best = r[0];
            for &v in r {
                if v > best {
                    best = v;
                }
            }
            s += best;
        }
        assert!((avg_conf(&p).unwrap() - s / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ens_avg_conf_examples() {
        let p = m(&[&[0.6, 0.4], &[0.1, 0.9]]);
        let same = EnsemblePredictions::from_probs(vec![p.clone(), p.clone()]).unwrap();
        assert_eq!(ens_avg_conf(&same).unwrap(), avg_conf(&p).unwrap());
        let opp = EnsemblePredictions::from_labels(&[vec![0], vec![1]], 2).unwrap();
        assert_eq!(ens_avg_conf(&opp).unwrap(), 0.5);
        let a = m(&[&[0.2, 0.8], &[0.6, 0.4]]);
        let b = m(&[&[0.6, 0.4], &[0.3, 0.7]]);
        let e = EnsemblePredictions::from_probs(vec![a, b]).unwrap();
        let oracle = (0.6f64.max(0.4) + 0.45f64.max(0.55)) / 2.0;
        assert!((ens_avg_conf(&e).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn calibration_examples() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t0 = calibrate_threshold(&scores, 0.0).unwrap();
        assert!(t0 < 0.1 && flag_below(&scores, t0).is_empty());
        let t = calibrate_threshold(&scores, 0.3).unwrap();
        assert_eq!(flag_below(&scores, t), vec![0, 1, 2]);
        // ties at the cut flag the whole tie group
        let tied = [0.1, 0.2, 0.2, 0.2, 0.5];
        let t = calibrate_threshold(&tied, 0.4).unwrap();
        assert_eq!(flag_below(&tied, t).len(), 4);
        let t = calibrate_threshold(&tied, 1.0).unwrap();
        assert_eq!(flag_below(&tied, t).len(), 5);
    }

    #[test]
    fn msp_examples() {
        let p = m(&[&[0.9, 0.1], &[0.55, 0.45], &[0.3, 0.7], &[0.5, 0.5], &[0.2, 0.8]]);
        assert!(msp_detect(&p, 0.0).unwrap().is_empty());
        assert_eq!(msp_detect(&p, 1.5).unwrap().len(), 5);
        assert_eq!(msp_detect(&p, 0.7).unwrap(), vec![1, 3]);
        assert!(msp_detect(&p, f64::NAN).is_err());
    }

    #[test]
    fn trust_score_examples() {
        let train = m(&[&[0.0, 0.0], &[10.0, 0.0]]);
        let s = trust_score(&train, &[0, 1], 2, &m(&[&[0.0, 0.0]]), &[0], 1).unwrap();
        assert_eq!(s, vec![TRUST_SCORE_CAP]);
        let s = trust_score(&train, &[0, 1], 2, &m(&[&[5.0, 3.0]]), &[0], 1).unwrap();
        assert_eq!(s, vec![1.0]);
        assert!(trust_score(&train, &[0, 0], 2, &m(&[&[5.0, 3.0]]), &[0], 1).is_err());
    }

    #[test]
    fn trust_score_brute_force() {
        let train = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], &[4.0, 4.0], &[5.0, 3.0], &[3.0, 5.0]]);
        let labels = [0, 0, 0, 1, 1, 1];
        let test = m(&[&[1.0, 1.0], &[4.0, 3.0], &[2.0, 2.0]]);
        let f = [0, 0, 1];
        for k in 1..=3 {
            let got = trust_score(&train, &labels, 2, &test, &f, k).unwrap();
            for j in 0..3 {
                let mut per = [Vec::new(), Vec::new()];
                for i in 0..6 {
                    let dx = test.get(j, 0) - train.get(i, 0);
                    let dy = test.get(j, 1) - train.get(i, 1);
                    per[labels[i]].push((dx * dx + dy * dy).sqrt());
                }
                for v in per.iter_mut() {
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                }
                let own = per[f[j]][k - 1];
                let other = per[1 - f[j]][k - 1];
                assert!((got[j] - other / own).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn calibration_fraction_within_tie_mass(raw in prop::collection::vec(0u8..6, 1..40), rate in 0.0f64..=1.0) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 5.0).collect();
            let t = calibrate_threshold(&scores, rate).unwrap();
            let n = scores.len() as f64;
            let frac = flag_below(&scores, t).len() as f64 / n;
            let max_tie = (0..6).map(|v| raw.iter().filter(|&&r| r == v).count()).max().unwrap() as f64 / n;
            prop_assert!(frac + 1e-12 >= rate && frac <= rate + max_tie + 1e-12);
        }

        #[test]
        fn trust_score_translation_and_scale(seed in 0u64..1000, shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                (0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect::<Vec<_>>()
            };
            let tr = pts(12, &mut rng);
            let te = pts(5, &mut rng);
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let f: Vec<usize> = (0..5).map(|i| i % 3).collect();
            let base = trust_score(&DenseMatrix::from_rows(&tr).unwrap(), &labels, 3, &DenseMatrix::from_rows(&te).unwrap(), &f, 2).unwrap();
            let map = |v: &Vec<Vec<f64>>| DenseMatrix::from_rows(&v.iter().map(|r| r.iter().map(|x| (x + shift) * scale).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
            let moved = trust_score(&map(&tr), &labels, 3, &map(&te), &f, 2).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
