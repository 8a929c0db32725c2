//! Biased (V-statistic) squared MMD with a Gaussian kernel
//! `k(a, b) = exp(-|a - b|^2 / (2 bw^2))`.

use super::matrix::DenseMatrix;
use crate::error::{invalid, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(x: &DenseMatrix, y: &DenseMatrix, bandwidth: f64) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return invalid("mmd2 needs non-empty samples");
    }
    if x.cols() != y.cols() {
        return invalid(format!("mmd2 dimension mismatch: {} vs {}", x.cols(), y.cols()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return invalid("mmd2 bandwidth must be positive and finite");
    }
    Ok(())
}

fn kernel_sum(a: &DenseMatrix, b: &DenseMatrix, inv: f64) -> f64 {
    let mut s = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            s += (-sq_dist(ra, rb) * inv).exp();
        }
    }
    s
}

pub fn mmd2(x: &DenseMatrix, y: &DenseMatrix, bandwidth: f64) -> Result<f64> {
    check(x, y, bandwidth)?;
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let v = kernel_sum(x, x, inv) / (n * n) + kernel_sum(y, y, inv) / (m * m)
        - 2.0 * kernel_sum(x, y, inv) / (n * m);
    Ok(v.max(0.0))
}

/// Returns `(mmd2, d mmd2 / d x, d mmd2 / d y)`; the gradients have the
/// shapes of `x` and `y`.
pub fn mmd2_with_grad(
    x: &DenseMatrix,
    y: &DenseMatrix,
    bandwidth: f64,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    check(x, y, bandwidth)?;
    let d = x.cols();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let bw2 = bandwidth * bandwidth;
    let (n, m) = (x.rows(), y.rows());
    let (nf, mf) = (n as f64, m as f64);
    let mut gx = DenseMatrix::zeros(n, d);
    let mut gy = DenseMatrix::zeros(m, d);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);

    // d k(a,b) / d a = -k(a,b) (a - b) / bw^2
    let accumulate = |a: &DenseMatrix, b: &DenseMatrix, coef: f64, ga: &mut DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            let ra = a.row(i);
            let dst = &mut ga.data_mut()[i * d..(i + 1) * d];
            for rb in b.iter_rows() {
                let k = (-sq_dist(ra, rb) * inv).exp();
                s += k;
                let c = -coef * k / bw2;
                for t in 0..d {
                    dst[t] += c * (ra[t] - rb[t]);
                }
            }
        }
        s
    };
    // Each within-sample pair contributes twice (as a and as b).
    sxx += accumulate(x, x, 2.0 / (nf * nf), &mut gx);
    syy += accumulate(y, y, 2.0 / (mf * mf), &mut gy);
    sxy += accumulate(x, y, -2.0 / (nf * mf), &mut gx);
    accumulate(y, x, -2.0 / (nf * mf), &mut gy);

    let v = sxx / (nf * nf) + syy / (mf * mf) - 2.0 * sxy / (nf * mf);
    Ok((v.max(0.0), gx, gy))
}

/// Median pairwise Euclidean distance among the rows; 1.0 when degenerate.
pub fn median_bandwidth(pooled: &DenseMatrix) -> f64 {
    let mut dists = Vec::new();
    for i in 0..pooled.rows() {
        for j in i + 1..pooled.rows() {
            dists.push(sq_dist(pooled.row(i), pooled.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}
