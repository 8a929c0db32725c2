//! Training objective and its exact gradients:
//!
//! `mean CE(source) + pseudo_weight * mean CE(pseudo) + alpha * mmd2(phi(source), phi(target))`.

use super::matrix::DenseMatrix;
use super::mmd::{mmd2, mmd2_with_grad};
use super::model::{ForwardTrace, Layer, MlpModel};
use crate::datagen::LabeledDataset;
use crate::error::{invalid, Error, Result};

/// Representation-matching term of the objective.
#[derive(Debug, Clone, Copy)]
pub struct MmdTerm<'a> {
    pub target: &'a DenseMatrix,
    pub weight: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients laid out like the model: encoder layers, then predictor layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerGrad>,
    pub predictor: Vec<LayerGrad>,
}

impl Gradients {
    /// Same ordering as [`MlpModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.encoder.iter().chain(&self.predictor) {
            out.extend_from_slice(&g.weight);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

fn check_labels(ds: &LabeledDataset, k: usize, what: &str) -> Result<()> {
    if let Some(&bad) = ds.labels().iter().find(|&&y| y >= k) {
        return invalid(format!("{what} label {bad} out of range for {k} classes"));
    }
    Ok(())
}

fn nonempty(ds: Option<&LabeledDataset>) -> Option<&LabeledDataset> {
    ds.filter(|d| !d.is_empty())
}

/// Mean cross-entropy of `logits` against `labels`, via log-sum-exp.
fn mean_ce(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn logits_of(model: &MlpModel, features: &DenseMatrix) -> Result<DenseMatrix> {
    let mut a = model.represent(features)?;
    for l in &model.predictor {
        a = l.forward(&a).1;
    }
    Ok(a)
}

/// `mean CE(source) + pseudo_weight * mean CE(pseudo)`; an empty or absent
/// pseudo set contributes nothing.
pub fn weighted_ce_loss(
    model: &MlpModel,
    source: &LabeledDataset,
    pseudo: Option<&LabeledDataset>,
    pseudo_weight: f64,
) -> Result<f64> {
    if !(pseudo_weight >= 0.0) {
        return invalid("pseudo_weight must be non-negative");
    }
    if source.is_empty() {
        return invalid("source batch is empty");
    }
    let k = model.num_classes();
    check_labels(source, k, "source")?;
    let mut loss = mean_ce(&logits_of(model, source.features())?, source.labels());
    if let Some(p) = nonempty(pseudo) {
        check_labels(p, k, "pseudo")?;
        loss += pseudo_weight * mean_ce(&logits_of(model, p.features())?, p.labels());
    }
    Ok(loss)
}

/// Full objective value including the optional MMD term.
pub fn objective_value(
    model: &MlpModel,
    source: &LabeledDataset,
    pseudo: Option<&LabeledDataset>,
    pseudo_weight: f64,
    mmd: Option<MmdTerm<'_>>,
) -> Result<f64> {
    let mut loss = weighted_ce_loss(model, source, pseudo, pseudo_weight)?;
    if let Some(term) = mmd {
        let phi_s = model.represent(source.features())?;
        let phi_t = model.represent(term.target)?;
        loss += term.weight * mmd2(&phi_s, &phi_t, term.bandwidth)?;
    }
    Ok(loss)
}

fn first_non_finite(trace: &ForwardTrace, offset: usize) -> Option<usize> {
    trace
        .activations
        .iter()
        .skip(1)
        .position(|a| !a.is_finite())
        .map(|i| i + offset)
}

/// Backward pass through `layers`, given the gradient at the output.
/// Returns per-layer gradients and the gradient at the input.
fn backward_layers(
    layers: &[Layer],
    trace: &ForwardTrace,
    mut upstream: DenseMatrix,
    layer_offset: usize,
) -> Result<(Vec<LayerGrad>, DenseMatrix)> {
    let mut grads = vec![
        LayerGrad {
            weight: Vec::new(),
            bias: Vec::new()
        };
        layers.len()
    ];
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let z = &trace.pre_activations[li];
        let input = &trace.activations[li];
        let (rows, out, inp) = (z.rows(), layer.out_dim(), layer.in_dim());
        let mut dz = upstream;
        for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
            *d *= layer.activation.derivative(zv);
        }
        let mut gw = vec![0.0; out * inp];
        let mut gb = vec![0.0; out];
        for r in 0..rows {
            let dzr = dz.row(r);
            let xr = input.row(r);
            for o in 0..out {
                let g = dzr[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let dst = &mut gw[o * inp..(o + 1) * inp];
                for (w, x) in dst.iter_mut().zip(xr) {
                    *w += g * x;
                }
            }
        }
        let mut din = DenseMatrix::zeros(rows, inp);
        let wdata = layer.weight.data();
        for r in 0..rows {
            let dzr = dz.row(r);
            let dst = &mut din.data_mut()[r * inp..(r + 1) * inp];
            for o in 0..out {
                let g = dzr[o];
                if g == 0.0 {
                    continue;
                }
                for (d, w) in dst.iter_mut().zip(&wdata[o * inp..(o + 1) * inp]) {
                    *d += g * w;
                }
            }
        }
        if gw.iter().chain(&gb).any(|v| !v.is_finite()) || !din.is_finite() {
            return Err(Error::Numerical {
                layer: layer_offset + li,
                detail: "non-finite gradient".into(),
            });
        }
        grads[li] = LayerGrad {
            weight: gw,
            bias: gb,
        };
        upstream = din;
    }
    Ok((grads, upstream))
}

/// Exact gradients of [`objective_value`] with respect to every parameter.
/// Returns the objective value alongside.
pub fn backprop(
    model: &MlpModel,
    source: &LabeledDataset,
    pseudo: Option<&LabeledDataset>,
    pseudo_weight: f64,
    mmd: Option<MmdTerm<'_>>,
) -> Result<(f64, Gradients)> {
    if !(pseudo_weight >= 0.0) {
        return invalid("pseudo_weight must be non-negative");
    }
    if source.is_empty() {
        return invalid("source batch is empty");
    }
    let k = model.num_classes();
    check_labels(source, k, "source")?;
    let pseudo = nonempty(pseudo);
    if let Some(p) = pseudo {
        check_labels(p, k, "pseudo")?;
    }
    if let Some(term) = &mmd {
        if !(term.bandwidth > 0.0) {
            return invalid("mmd bandwidth must be positive");
        }
        if !(term.weight >= 0.0) {
            return invalid("mmd weight must be non-negative");
        }
    }

    let n_src = source.len();
    let n_ps = pseudo.map_or(0, LabeledDataset::len);
    let n_ce = n_src + n_ps;
    let mut inputs = source.features().clone();
    if let Some(p) = pseudo {
        inputs = inputs.vstack(p.features())?;
    }
    if let Some(term) = &mmd {
        inputs = inputs.vstack(term.target)?;
    }
    model.check_input(&inputs)?;
    let n_all = inputs.rows();

    let enc_trace = MlpModel::trace_layers(&model.encoder, inputs);
    if let Some(layer) = first_non_finite(&enc_trace, 0) {
        return Err(Error::Numerical {
            layer,
            detail: "non-finite activation".into(),
        });
    }
    let reps = enc_trace.activations.last().expect("nonempty");
    let ce_rows: Vec<usize> = (0..n_ce).collect();
    let pred_trace = MlpModel::trace_layers(&model.predictor, reps.select_rows(&ce_rows));
    let enc_len = model.encoder.len();
    if let Some(layer) = first_non_finite(&pred_trace, enc_len) {
        return Err(Error::Numerical {
            layer,
            detail: "non-finite activation".into(),
        });
    }
    let logits = pred_trace.activations.last().expect("nonempty");

    // d loss / d logits = coef * (softmax - onehot)
    let mut dlogits = DenseMatrix::zeros(n_ce, k);
    let mut loss = 0.0;
    let mut ps_loss = 0.0;
    for r in 0..n_ce {
        let (y, coef) = if r < n_src {
            (source.labels()[r], 1.0 / n_src as f64)
        } else {
            (
                pseudo.expect("pseudo rows").labels()[r - n_src],
                pseudo_weight / n_ps as f64,
            )
        };
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let ce = max + sum.ln() - row[y];
        if r < n_src {
            loss += ce;
        } else {
            ps_loss += ce;
        }
        let dst = &mut dlogits.data_mut()[r * k..(r + 1) * k];
        for c in 0..k {
            let p = (row[c] - max).exp() / sum;
            dst[c] = coef * (p - if c == y { 1.0 } else { 0.0 });
        }
    }
    loss /= n_src as f64;
    if n_ps > 0 {
        loss += pseudo_weight * ps_loss / n_ps as f64;
    }

    let (pred_grads, dreps_ce) = backward_layers(&model.predictor, &pred_trace, dlogits, enc_len)?;
    let rdim = reps.cols();
    let mut dreps = DenseMatrix::zeros(n_all, rdim);
    dreps.data_mut()[..n_ce * rdim].copy_from_slice(dreps_ce.data());

    if let Some(term) = &mmd {
        let src_rows: Vec<usize> = (0..n_src).collect();
        let tgt_rows: Vec<usize> = (n_ce..n_all).collect();
        let (val, gs, gt) = mmd2_with_grad(
            &reps.select_rows(&src_rows),
            &reps.select_rows(&tgt_rows),
            term.bandwidth,
        )?;
        loss += term.weight * val;
        let d = dreps.data_mut();
        for (i, g) in gs.data().iter().enumerate() {
            d[i] += term.weight * g;
        }
        let base = n_ce * rdim;
        for (i, g) in gt.data().iter().enumerate() {
            d[base + i] += term.weight * g;
        }
    }

    let (enc_grads, _) = backward_layers(&model.encoder, &enc_trace, dreps, 0)?;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            layer: enc_len + model.predictor.len() - 1,
            detail: "non-finite loss".into(),
        });
    }
    Ok((
        loss,
        Gradients {
            encoder: enc_grads,
            predictor: pred_grads,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Activation, Architecture};

    fn ds(rows: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> LabeledDataset {
        LabeledDataset::new(DenseMatrix::from_rows(&rows).unwrap(), labels, k).unwrap()
    }

    fn zero_model(d: usize, k: usize) -> MlpModel {
        let layer = Layer {
            weight: DenseMatrix::zeros(k, d),
            bias: vec![0.0; k],
            activation: Activation::Identity,
        };
        MlpModel::from_layers(vec![], vec![layer], k).unwrap()
    }

    #[test]
    fn uniform_binary_prediction_costs_ln2() {
        let m = zero_model(2, 2);
        let src = ds(vec![vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 3.0]], vec![0, 1, 1], 2);
        let l = weighted_ce_loss(&m, &src, None, 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        // Huge logit margin: probability rounds to exactly 1 on the true label.
        let layer = Layer {
            weight: DenseMatrix::from_rows(&[vec![1000.0], vec![-1000.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        };
        let m = MlpModel::from_layers(vec![], vec![layer], 2).unwrap();
        let src = ds(vec![vec![1.0], vec![2.0]], vec![0, 0], 2);
        assert_eq!(weighted_ce_loss(&m, &src, None, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn weighted_loss_matches_scalar_loop() {
        let arch = Architecture::new(3, &[4], &[], 3);
        let m = MlpModel::init(&arch, 3).unwrap();
        let mk = |n: usize, off: f64| -> LabeledDataset {
            let rows = (0..n)
                .map(|i| (0..3).map(|c| ((i * 3 + c) as f64 + off).cos()).collect())
                .collect();
            ds(rows, (0..n).map(|i| (i + off as usize) % 3).collect(), 3)
        };
        let src = mk(10, 0.0);
        let ps = mk(5, 1.0);
        let got = weighted_ce_loss(&m, &src, Some(&ps), 0.1).unwrap();
        let probs_s = m.predict_proba(src.features()).unwrap();
        let probs_p = m.predict_proba(ps.features()).unwrap();
        let mut a = 0.0;
        for i in 0..10 {
            a -= probs_s.get(i, src.labels()[i]).ln();
        }
        let mut b = 0.0;
        for i in 0..5 {
            b -= probs_p.get(i, ps.labels()[i]).ln();
        }
        let expect = a / 10.0 + 0.1 * b / 5.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let m = zero_model(1, 2);
        let src = ds(vec![vec![1.0]], vec![2], 3);
        assert!(weighted_ce_loss(&m, &src, None, 0.0).is_err());
    }

    #[test]
    fn zero_model_final_bias_gradient_is_mean_softmax_minus_onehot() {
        let m = zero_model(2, 2);
        let src = ds(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![0, 1, 0, 1],
            2,
        );
        let (_, g) = backprop(&m, &src, None, 0.0, None).unwrap();
        // softmax = [0.5, 0.5]; mean(onehot) = [0.5, 0.5]
        assert_eq!(g.predictor[0].bias, vec![0.0, 0.0]);
        let src1 = ds(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0, 0], 2);
        let (_, g1) = backprop(&m, &src1, None, 0.0, None).unwrap();
        assert_eq!(g1.predictor[0].bias, vec![-0.5, 0.5]);
    }

    #[test]
    fn zero_pseudo_weight_equals_source_only() {
        let arch = Architecture::new(2, &[3], &[], 2);
        let m = MlpModel::init(&arch, 9).unwrap();
        let src = ds(vec![vec![1.0, 0.5], vec![-1.0, 0.2]], vec![0, 1], 2);
        let ps = ds(vec![vec![0.3, 0.3]], vec![1], 2);
        let (la, a) = backprop(&m, &src, None, 0.0, None).unwrap();
        let (lb, b) = backprop(&m, &src, Some(&ps), 0.0, None).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.flatten(), b.flatten());
    }
}
