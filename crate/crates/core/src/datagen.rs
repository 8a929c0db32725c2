//! Labeled datasets, synthetic distribution-shift generators and CSV I/O.
//!
//! CSV layout: a header `f0,...,f{d-1},label` followed by one numeric row per
//! point, UTF-8, comma separated, `\n` line endings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkernel::DenseMatrix;
use crate::rng::{stream, TAG_DATA, TAG_SHIFT};

/// Feature matrix with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return invalid(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!("label {bad} not below num_classes {num_classes}"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn into_features(self) -> DenseMatrix {
        self.features
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Splits into the rows at the listed positions and the rest.
    pub fn split(&self, first: &[usize]) -> (Self, Self) {
        let mut taken = vec![false; self.len()];
        first.iter().for_each(|&i| taken[i] = true);
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !taken[i]).collect();
        (self.select(first), self.select(&rest))
    }
}

/// `num_classes` isotropic unit-variance Gaussian clusters whose centers are
/// at pairwise distance at least `separation`. Rows are grouped by class.
pub fn gen_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim < 2 {
        return invalid("gaussian mixture needs K >= 2 and d >= 2");
    }
    if !(separation > 0.0) {
        return invalid("separation must be positive");
    }
    let mut rng = stream(seed, &[TAG_DATA, 0]);
    let mut centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..num_classes {
        for j in i + 1..num_classes {
            let d: f64 = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = separation / min_dist.max(f64::MIN_POSITIVE);
    centers.iter_mut().flatten().for_each(|c| *c *= scale);

    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(
        DenseMatrix::new(num_classes * per_class, dim, data)?,
        labels,
        num_classes,
    )
}

/// Two interleaved half circles in 2-D; class 0 is the upper unit half circle.
pub fn gen_two_moons(count_per_class: usize, noise_sd: f64, seed: u64) -> Result<LabeledDataset> {
    if !(noise_sd >= 0.0) {
        return invalid("noise_sd must be non-negative");
    }
    let mut rng = stream(seed, &[TAG_DATA, 1]);
    let mut rows = Vec::with_capacity(2 * count_per_class);
    let mut labels = Vec::with_capacity(2 * count_per_class);
    let denom = count_per_class.saturating_sub(1).max(1) as f64;
    for class in 0..2 {
        for i in 0..count_per_class {
            let t = std::f64::consts::PI * i as f64 / denom;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (jx, jy) = if noise_sd > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                let m: f64 = StandardNormal.sample(&mut rng);
                (noise_sd * n, noise_sd * m)
            } else {
                (0.0, 0.0)
            };
            rows.push(vec![x + jx, y + jy]);
            labels.push(class);
        }
    }
    LabeledDataset::new(DenseMatrix::from_rows(&rows)?, labels, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    MeanShift,
    Rotation,
    LabelShift,
    FeatureNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Applies a synthetic distribution shift.
///
/// - `mean_shift`: adds `magnitude * (1, ..., 1) / sqrt(d)` to every row.
/// - `rotation`: rotates feature dims 0 and 1 by `magnitude` radians.
/// - `label_shift`: subsamples so class priors are proportional to
///   `magnitude^k`, keeping as many rows as the rarest class allows.
/// - `feature_noise`: adds i.i.d. `N(0, magnitude^2)` to every feature.
pub fn apply_shift(dataset: &LabeledDataset, spec: &ShiftSpec) -> Result<LabeledDataset> {
    if !(spec.magnitude >= 0.0 && spec.magnitude.is_finite()) {
        return invalid("shift magnitude must be finite and non-negative");
    }
    let d = dataset.dim();
    let mut features = dataset.features.clone();
    match spec.kind {
        ShiftKind::MeanShift => {
            let delta = spec.magnitude / (d as f64).sqrt();
            features.data_mut().iter_mut().for_each(|v| *v += delta);
        }
        ShiftKind::Rotation => {
            if d < 2 {
                return invalid("rotation needs at least two feature dimensions");
            }
            let (s, c) = spec.magnitude.sin_cos();
            for row in features.data_mut().chunks_exact_mut(d) {
                let (x, y) = (row[0], row[1]);
                row[0] = c * x - s * y;
                row[1] = s * x + c * y;
            }
        }
        ShiftKind::FeatureNoise => {
            if spec.magnitude > 0.0 {
                let normal = Normal::new(0.0, spec.magnitude).expect("valid sd");
                let mut rng = stream(spec.seed, &[TAG_SHIFT, 0]);
                features
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += normal.sample(&mut rng));
            }
        }
        ShiftKind::LabelShift => return label_shift(dataset, spec),
    }
    LabeledDataset::new(features, dataset.labels.clone(), dataset.num_classes)
}

fn label_shift(dataset: &LabeledDataset, spec: &ShiftSpec) -> Result<LabeledDataset> {
    let k = dataset.num_classes;
    let weights: Vec<f64> = (0..k).map(|c| spec.magnitude.powi(c as i32)).collect();
    let total: f64 = weights.iter().sum();
    let priors: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let counts = dataset.class_counts();
    let keep_total = priors
        .iter()
        .zip(&counts)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, &c)| (c as f64 / p).floor())
        .fold(f64::INFINITY, f64::min);
    let mut rng = stream(spec.seed, &[TAG_SHIFT, 1]);
    let mut keep = Vec::new();
    for c in 0..k {
        let take = ((keep_total * priors[c]) + 1e-9).floor() as usize;
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..take.min(members.len())]);
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

fn check_header(headers: &csv::StringRecord, expect_label: bool) -> Result<usize> {
    let n = headers.len();
    let d = if expect_label { n.saturating_sub(1) } else { n };
    for (i, h) in headers.iter().take(d).enumerate() {
        if h.trim() != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected header column f{i}, found {h:?}"),
            });
        }
    }
    if expect_label && headers.get(d).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            detail: "last header column must be `label`".into(),
        });
    }
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "no feature columns".into(),
        });
    }
    Ok(d)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(e, 0))
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            detail: format!("{other:?}"),
        },
    }
}

fn read_rows(path: &Path, with_labels: bool) -> Result<(DenseMatrix, Vec<(usize, String)>)> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    let has_label_col = headers.iter().next_back().map(str::trim) == Some("label");
    let d = check_header(&headers, has_label_col)?;
    if with_labels && !has_label_col {
        return Err(Error::Parse {
            line: 1,
            detail: "missing `label` column".into(),
        });
    }
    let width = if has_label_col { d + 1 } else { d };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                detail: format!("expected {width} cells, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                detail: format!("column f{c}: non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    detail: format!("column f{c}: non-finite value"),
                });
            }
            data.push(v);
        }
        if with_labels {
            labels.push((line, rec.get(d).unwrap_or("").trim().to_string()));
        }
        rows += 1;
    }
    Ok((DenseMatrix::new(rows, d, data)?, labels))
}

/// Reads a labeled CSV. With `num_classes = None` the class count is
/// `max(label) + 1` (at least 2).
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let (features, raw) = read_rows(path.as_ref(), true)?;
    let mut labels = Vec::with_capacity(raw.len());
    for (line, cell) in &raw {
        let y: usize = cell.parse().map_err(|_| Error::Parse {
            line: *line,
            detail: format!("label: not a non-negative integer: {cell:?}"),
        })?;
        if let Some(k) = num_classes {
            if y >= k {
                return invalid(format!("line {line}: label {y} not below declared {k} classes"));
            }
        }
        labels.push(y);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    LabeledDataset::new(features, labels, k)
}

/// Reads only the feature columns; the label column, if present, is never
/// parsed.
pub fn load_csv_features(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    Ok(read_rows(path.as_ref(), false)?.0)
}

pub fn save_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path.as_ref())
        .map_err(|e| csv_error(e, 0))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(e, 0))?;
    for (row, y) in dataset.features.iter_rows().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}
