use super::matrix::DenseMatrix;
use super::model::MlpModel;
use super::objective::{backprop, objective_value, MmdTerm};
use crate::datagen::LabeledDataset;
use crate::error::Result;

/// Inputs of one objective evaluation for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckBatch {
    pub source: LabeledDataset,
    pub pseudo: Option<LabeledDataset>,
    pub pseudo_weight: f64,
    /// `(target, weight, bandwidth)` of the MMD term.
    pub mmd: Option<(DenseMatrix, f64, f64)>,
}

impl GradCheckBatch {
    fn mmd_term(&self) -> Option<MmdTerm<'_>> {
        self.mmd.as_ref().map(|(t, w, bw)| MmdTerm {
            target: t,
            weight: *w,
            bandwidth: *bw,
        })
    }

    fn value(&self, model: &MlpModel) -> Result<f64> {
        objective_value(model, &self.source, self.pseudo.as_ref(), self.pseudo_weight, self.mmd_term())
    }

    pub fn analytic_gradient(&self, model: &MlpModel) -> Result<Vec<f64>> {
        let (_, g) = backprop(model, &self.source, self.pseudo.as_ref(), self.pseudo_weight, self.mmd_term())?;
        Ok(g.flatten())
    }
}

/// Max relative error between [`backprop`] and central finite differences,
/// with denominator `max(|a|, |b|, 1e-8)`. `step` is clamped into `(1e-8, 1e-2)`.
pub fn grad_check(model: &MlpModel, batch: &GradCheckBatch, step: f64) -> Result<f64> {
    let analytic = batch.analytic_gradient(model)?;
    grad_check_against(model, batch, step, &analytic)
}

/// Like [`grad_check`] but compares against a caller-supplied gradient vector.
pub fn grad_check_against(model: &MlpModel, batch: &GradCheckBatch, step: f64, analytic: &[f64]) -> Result<f64> {
    let step = step.clamp(1e-8 * (1.0 + f64::EPSILON), 1e-2 * (1.0 - f64::EPSILON));
    let base = model.flat_params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + step;
        probe.set_flat_params(&params)?;
        let up = batch.value(&probe)?;
        params[i] = base[i] - step;
        probe.set_flat_params(&params)?;
        let down = batch.value(&probe)?;
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Activation, Architecture, Layer};
    use crate::rng::stream;
    use rand::Rng;

    fn random_batch(seed: u64, d: usize, k: usize, with_mmd: bool) -> GradCheckBatch {
        let mut rng = stream(seed, &[99]);
        let mut mk = |n: usize| {
            let f = DenseMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let y = (0..n).map(|_| rng.random_range(0..k)).collect();
            LabeledDataset::new(f, y, k).unwrap()
        };
        let source = mk(6);
        let pseudo = mk(3);
        let target = mk(4).features().clone();
        GradCheckBatch {
            source,
            pseudo: Some(pseudo),
            pseudo_weight: 0.3,
            mmd: with_mmd.then_some((target, 0.7, 1.5)),
        }
    }

    fn perturbed_model(seed: u64, d: usize, k: usize) -> MlpModel {
        let mut m = MlpModel::init(&Architecture::new(d, &[5, 4], &[3], k), seed).unwrap();
        let mut rng = stream(seed, &[98]);
        let p: Vec<f64> = m.flat_params().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        m.set_flat_params(&p).unwrap();
        m
    }

    #[test]
    fn backprop_agrees_with_finite_differences() {
        for seed in 0..5 {
            let m = perturbed_model(seed, 3, 3);
            let b = random_batch(seed, 3, 3, seed % 2 == 0);
            let err = grad_check(&m, &b, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zeroed_weight_gradient_is_caught() {
        let m = perturbed_model(1, 3, 3);
        let b = random_batch(1, 3, 3, true);
        let mut g = b.analytic_gradient(&m).unwrap();
        let idx = g.iter().position(|v| v.abs() > 1e-4).unwrap();
        g[idx] = 0.0;
        assert!(grad_check_against(&m, &b, 1e-5, &g).unwrap() > 1e-2);
    }

    #[test]
    fn constant_model_does_not_crash() {
        let enc = Layer {
            weight: DenseMatrix::zeros(4, 3),
            bias: vec![0.0; 4],
            activation: Activation::Identity,
        };
        let pred = Layer {
            weight: DenseMatrix::zeros(2, 4),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        };
        let m = MlpModel::from_layers(vec![enc], vec![pred], 2).unwrap();
        let b = random_batch(3, 3, 2, true);
        assert!(grad_check(&m, &b, 1e-5).unwrap().is_finite());
    }
}
