use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{affine, DenseMatrix};
use crate::error::{invalid, Result};
use crate::rng::{stream, TAG_INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer `a -> act(a W^T + b)` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn forward(&self, input: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
        let z = affine(input, &self.weight, &self.bias);
        let mut a = z.clone();
        if self.activation != Activation::Identity {
            a.data_mut()
                .iter_mut()
                .for_each(|v| *v = self.activation.apply(*v));
        }
        (z, a)
    }
}

/// Layer widths of an encoder/predictor network.
///
/// Encoder and predictor hidden layers use ReLU; the last predictor layer maps
/// to `num_classes` logits with no activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder: Vec<usize>,
    #[serde(default)]
    pub predictor_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, encoder: &[usize], predictor_hidden: &[usize], num_classes: usize) -> Self {
        Self {
            input_dim,
            encoder: encoder.to_vec(),
            predictor_hidden: predictor_hidden.to_vec(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return invalid("num_classes must be at least 2");
        }
        if self.input_dim == 0 {
            return invalid("input_dim must be positive");
        }
        if self.encoder.iter().chain(&self.predictor_hidden).any(|&w| w == 0) {
            return invalid("layer widths must be positive");
        }
        Ok(())
    }
}

/// Feed-forward classifier `h(x) = c(phi(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub encoder: Vec<Layer>,
    pub predictor: Vec<Layer>,
    num_classes: usize,
}

pub(crate) struct ForwardTrace {
    /// Input to every layer, encoder first; the last entry is the logits.
    pub activations: Vec<DenseMatrix>,
    /// Pre-activation of every layer.
    pub pre_activations: Vec<DenseMatrix>,
}

impl MlpModel {
    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(encoder: Vec<Layer>, predictor: Vec<Layer>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return invalid("num_classes must be at least 2");
        }
        if predictor.is_empty() {
            return invalid("predictor needs at least one layer");
        }
        let layers: Vec<&Layer> = encoder.iter().chain(&predictor).collect();
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return invalid(format!("layer {i}: bias length {} != width {}", l.bias.len(), l.out_dim()));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return invalid(format!(
                    "layer {i}: input width {} does not chain with previous output {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                ));
            }
        }
        if predictor.last().map(Layer::out_dim) != Some(num_classes) {
            return invalid("final predictor width must equal num_classes");
        }
        Ok(Self {
            encoder,
            predictor,
            num_classes,
        })
    }

    /// Scaled-uniform initialisation: weights in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, &[TAG_INIT]);
        let mut make = |fan_in: usize, fan_out: usize, activation: Activation| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            Layer {
                weight: DenseMatrix::new(fan_out, fan_in, data).expect("finite init"),
                bias: vec![0.0; fan_out],
                activation,
            }
        };
        let mut width = arch.input_dim;
        let mut encoder = Vec::new();
        for &w in &arch.encoder {
            encoder.push(make(width, w, Activation::Relu));
            width = w;
        }
        let mut predictor = Vec::new();
        for &w in &arch.predictor_hidden {
            predictor.push(make(width, w, Activation::Relu));
            width = w;
        }
        predictor.push(make(width, arch.num_classes, Activation::Identity));
        Self::from_layers(encoder, predictor, arch.num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers().next().map(Layer::in_dim).unwrap_or(0)
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder
            .last()
            .map(Layer::out_dim)
            .unwrap_or_else(|| self.input_dim())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(&self.predictor)
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder.iter_mut().chain(self.predictor.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return invalid("parameter vector length mismatch");
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, batch: &DenseMatrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return invalid(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    /// Encoder output `phi(x)` for every row.
    pub fn represent(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(batch)?;
        let mut a = batch.clone();
        for l in &self.encoder {
            a = l.forward(&a).1;
        }
        Ok(a)
    }

    /// Returns `(phi(x), softmax(c(phi(x))))` for every row of `batch`.
    pub fn forward(&self, batch: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let reps = self.represent(batch)?;
        let mut a = reps.clone();
        for l in &self.predictor {
            a = l.forward(&a).1;
        }
        Ok((reps, softmax_rows(&a)))
    }

    pub fn predict_proba(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(batch)?.1)
    }

    /// Argmax labels with lowest-index tie-breaking.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<Vec<usize>> {
        let probs = self.predict_proba(batch)?;
        Ok(probs.iter_rows().map(argmax).collect())
    }

    pub(crate) fn trace_layers(layers: &[Layer], input: DenseMatrix) -> ForwardTrace {
        let mut activations = vec![input];
        let mut pre_activations = Vec::with_capacity(layers.len());
        for l in layers {
            let (z, a) = l.forward(activations.last().expect("nonempty"));
            pre_activations.push(z);
            activations.push(a);
        }
        ForwardTrace {
            activations,
            pre_activations,
        }
    }
}

/// Index of the largest entry; the first one wins on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    let cols = logits.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_predictor() -> MlpModel {
        let layer = Layer {
            weight: DenseMatrix::zeros(2, 3),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        };
        MlpModel::from_layers(vec![], vec![layer], 2).unwrap()
    }

    #[test]
    fn symmetric_logits_give_uniform_probabilities() {
        let m = identity_predictor();
        let batch = DenseMatrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let (reps, probs) = m.forward(&batch).unwrap();
        assert_eq!(probs.row(0), &[0.5, 0.5]);
        assert_eq!(reps, batch);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = identity_predictor();
        let batch = DenseMatrix::zeros(1, 4);
        assert!(m.forward(&batch).is_err());
    }

    #[test]
    fn layers_must_chain() {
        let a = Layer {
            weight: DenseMatrix::zeros(4, 3),
            bias: vec![0.0; 4],
            activation: Activation::Relu,
        };
        let b = Layer {
            weight: DenseMatrix::zeros(2, 5),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        };
        assert!(MlpModel::from_layers(vec![a], vec![b], 2).is_err());
    }

    // Straight-line re-implementation of the forward pass on nested vectors.
    fn reference_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in m.layers() {
            let mut next = Vec::new();
            for o in 0..l.out_dim() {
                let mut z = l.bias[o];
                for i in 0..l.in_dim() {
                    z += l.weight.get(o, i) * a[i];
                }
                next.push(match l.activation {
                    Activation::Relu => {
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => z,
                });
            }
            a = next;
        }
        let mx = a.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let arch = Architecture::new(4, &[6, 5], &[], 3);
        let mut m = MlpModel::init(&arch, 11).unwrap();
        let mut params = m.flat_params();
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.01 * ((i % 7) as f64 - 3.0);
        }
        m.set_flat_params(&params).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|r| (0..4).map(|c| ((r * 4 + c) as f64 * 0.37).sin() * 2.0).collect())
            .collect();
        let batch = DenseMatrix::from_rows(&rows).unwrap();
        let probs = m.predict_proba(&batch).unwrap();
        for (r, x) in rows.iter().enumerate() {
            let expect = reference_forward(&m, x);
            for k in 0..3 {
                assert!((probs.get(r, k) - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Architecture::new(3, &[8], &[4], 2);
        let a = MlpModel::init(&arch, 5).unwrap();
        let b = MlpModel::init(&arch, 5).unwrap();
        let c = MlpModel::init(&arch, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 11.0).sqrt();
        assert!(a.encoder[0].weight.data().iter().all(|w| w.abs() <= limit));
        assert_eq!(a.param_count(), 3 * 8 + 8 + 8 * 4 + 4 + 4 * 2 + 2);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalised_and_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 4),
            shift in -100.0f64..100.0,
        ) {
            let m = DenseMatrix::new(1, 4, logits.clone()).unwrap();
            let shifted = DenseMatrix::new(1, 4, logits.iter().map(|v| v + shift).collect()).unwrap();
            let p = softmax_rows(&m);
            let q = softmax_rows(&shifted);
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
