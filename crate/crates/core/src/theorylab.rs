//! Closed-form bound evaluators and a synthetic ensemble simulator.
//!
//! The simulator implements [`EnsembleTrainer`] by writing down per-point
//! label distributions for `h ~ T` directly, so the conditions the analysis
//! assumes (small error on correct points, low agreement with `f` on the
//! pseudo-labeled set, diversity on the remaining errors) hold by
//! construction and every quantity can be measured exactly. In probability
//! mode the distributions are used as-is; in sampling mode `N` members are
//! drawn per point, mirroring a trained ensemble.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::{EnsembleTrainer, LabelDistribution};
use crate::error::{invalid, Error, Result};
use crate::framework::{construct_r_threshold, PseudoLabelSet};
use crate::metrics::{idealized_b, measure_gamma, measure_nu, measure_sigma2, misclassified, partition_gb};
use crate::numkernel::DenseMatrix;
use crate::rng::{derive_seed, stream, TAG_SIM};

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return invalid(format!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

fn ceil_count(x: f64) -> Option<u64> {
    (x.is_finite() && x > 0.0).then(|| x.ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub nu_tilde: f64,
    pub gamma_tilde: f64,
    pub sigma2_l: f64,
    pub e_f: f64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon_target: f64,
}

fn default_classes() -> usize {
    2
}

fn default_epsilon() -> f64 {
    0.01
}

impl BoundInputs {
    pub fn new(nu_tilde: f64, gamma_tilde: f64, sigma2_l: f64, e_f: f64) -> Self {
        Self {
            nu_tilde,
            gamma_tilde,
            sigma2_l,
            e_f,
            eta: None,
            delta: None,
            num_classes: default_classes(),
            iterations: None,
            epsilon_target: default_epsilon(),
        }
    }

    pub fn with_eta_delta(mut self, eta: f64, delta: f64) -> Self {
        self.eta = Some(eta);
        self.delta = Some(delta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_rate("nu_tilde", self.nu_tilde)?;
        check_rate("gamma_tilde", self.gamma_tilde)?;
        check_rate("sigma2_l", self.sigma2_l)?;
        check_rate("e_f", self.e_f)?;
        if let Some(eta) = self.eta {
            check_rate("eta", eta)?;
        }
        if self.num_classes < 2 {
            return invalid("num_classes must be at least 2");
        }
        Ok(())
    }

    /// `sqrt(1 - eta)`.
    pub fn tau(&self) -> Option<f64> {
        self.eta.map(|e| (1.0 - e).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub acc_err_bound: f64,
    /// `|W_X △ R_X| / |U_X|` bound.
    pub sym_diff_bound: f64,
    /// `None` when the iteration count is unbounded.
    pub max_iterations: Option<u64>,
    pub tau: f64,
    pub violated_preconditions: Vec<String>,
}

impl BoundReport {
    pub fn preconditions_hold(&self) -> bool {
        self.violated_preconditions.is_empty()
    }
}

/// General bound for a threshold `tau = sqrt(1 - eta)` and progress rate
/// `delta`. Precondition violations are reported, not rejected; the `sigma^2`
/// and `nu` in the `eta` condition are taken to be `sigma2_l` and `nu_tilde`.
pub fn theorem1_bounds(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let (Some(eta), Some(delta)) = (inputs.eta, inputs.delta) else {
        return invalid("eta and delta are required");
    };
    if inputs.e_f == 0.0 {
        return invalid("e_f = 0 leaves epsilon undefined");
    }
    let tau = (1.0 - eta).sqrt();
    let (nu, gamma, s2, e_f) = (inputs.nu_tilde, inputs.gamma_tilde, inputs.sigma2_l, inputs.e_f);
    let mut violated = Vec::new();
    let eta_cap = 0.75 * s2.min(1.0 - nu * nu);
    if !(eta > 0.0 && eta < eta_cap) {
        violated.push(format!("eta in (0, 3 min(sigma2, 1 - nu^2) / 4) = (0, {eta_cap})"));
    }
    if !(delta > 0.0 && delta < s2 / 4.0) {
        violated.push(format!("delta in (0, sigma2_l / 4) = (0, {})", s2 / 4.0));
    }
    if tau >= 1.0 {
        violated.push("tau < 1".into());
    }
    let nu_ratio = nu / (1.0 - tau);
    let g = gamma / tau;
    let epsilon = g * (1.0 + nu_ratio * (1.0 - e_f) / e_f) / (s2 / 4.0 - delta + g);
    let first = nu_ratio * (1.0 - e_f);
    Ok(BoundReport {
        epsilon,
        acc_err_bound: first.max(epsilon * e_f),
        sym_diff_bound: first + epsilon * e_f,
        max_iterations: ceil_count(1.0 / delta),
        tau,
        violated_preconditions: violated,
    })
}

/// The special case `tau = 3/4`, `delta = 4 gamma / 3`.
pub fn corollary_bounds(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    if inputs.e_f == 0.0 {
        return invalid("e_f = 0 leaves epsilon undefined");
    }
    let (nu, gamma, s2, e_f) = (inputs.nu_tilde, inputs.gamma_tilde, inputs.sigma2_l, inputs.e_f);
    let mut violated = Vec::new();
    if nu >= 0.5 {
        violated.push("nu_tilde < 1/2".into());
    }
    if s2 <= 7.0 / 12.0 {
        violated.push("sigma2_l > 7/12".into());
    }
    if s2 < 16.0 * gamma / 3.0 {
        violated.push(format!("sigma2_l >= 16 gamma / 3 = {}", 16.0 * gamma / 3.0));
    }
    if gamma == 0.0 {
        violated.push("gamma_tilde > 0 (iteration count unbounded)".into());
    }
    let epsilon = 16.0 * gamma / (3.0 * s2) * (1.0 + 4.0 * nu * (1.0 - e_f) / e_f);
    let first = 4.0 * nu * (1.0 - e_f);
    Ok(BoundReport {
        epsilon,
        acc_err_bound: first.max(epsilon * e_f),
        sym_diff_bound: first + epsilon * e_f,
        max_iterations: ceil_count(3.0 / (4.0 * gamma)),
        tau: 0.75,
        violated_preconditions: violated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealizedBounds {
    pub b: Option<f64>,
    pub eta_lo: f64,
    pub eta_hi: Option<f64>,
    pub empty_interval: bool,
    pub t_needed: u64,
    pub violated_preconditions: Vec<String>,
}

/// Admissible `eta` range and iteration count of the idealized analysis,
/// with `nu = nu_tilde` the pointwise bound and `K = num_classes`.
pub fn idealized_bounds(inputs: &BoundInputs, sigma2: f64, r: f64) -> Result<IdealizedBounds> {
    inputs.validate()?;
    let eps = inputs.epsilon_target;
    if !(eps > 0.0 && eps < 1.0) {
        return invalid("epsilon_target must lie in (0, 1)");
    }
    if inputs.sigma2_l <= 0.0 {
        return invalid("sigma2_l must be positive");
    }
    let k = inputs.num_classes as f64;
    let nu = inputs.nu_tilde;
    let two_nu = 2.0 * nu - nu * nu;
    let mut violated = Vec::new();
    if sigma2 < k * two_nu {
        violated.push(format!("sigma2 >= K (2 nu - nu^2) = {}", k * two_nu));
    }
    let b = if r > 0.0 {
        Some(idealized_b(sigma2, nu, r))
    } else {
        violated.push("r > 0".into());
        None
    };
    let eta_hi = b.map(|b| (b / k).min(1.0 - nu * nu).min(1.0 - 1.0 / k));
    let empty_interval = eta_hi.is_none_or(|hi| hi <= two_nu);
    if empty_interval {
        violated.push("eta interval is empty".into());
    }
    Ok(IdealizedBounds {
        b,
        eta_lo: two_nu,
        eta_hi,
        empty_interval,
        t_needed: (eps.recip().ln() / inputs.sigma2_l).ceil() as u64,
        violated_preconditions: violated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    /// Pointwise conditions: error exactly `nu` on every correct point,
    /// `Pr[h != y~] = gamma_pseudo` on pseudo-labeled errors, and a share
    /// `confident_fraction` of the other errors with `Pr[h = y] = 1 - beta`.
    Idealized {
        nu: f64,
        beta: f64,
        gamma_pseudo: f64,
        sigma2: f64,
        #[serde(default)]
        confident_fraction: f64,
    },
    /// Average conditions: correct points split evenly between error
    /// `2 nu_bar` and error `0`; pseudo-labeled errors agree with `f` with
    /// probability `gamma_agree`.
    Relaxed {
        nu_bar: f64,
        gamma_agree: f64,
        sigma2: f64,
        #[serde(default)]
        confident_fraction: f64,
    },
}

impl Regime {
    fn sigma2(&self) -> f64 {
        match *self {
            Regime::Idealized { sigma2, .. } | Regime::Relaxed { sigma2, .. } => sigma2,
        }
    }

    fn confident_fraction(&self) -> f64 {
        match *self {
            Regime::Idealized { confident_fraction, .. } | Regime::Relaxed { confident_fraction, .. } => {
                confident_fraction
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEnsembleSpec {
    pub m: usize,
    pub num_classes: usize,
    pub e_f: f64,
    pub regime: Regime,
    /// Members drawn per point; `None` selects probability mode.
    #[serde(default)]
    pub members: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticEnsembleSpec {
    pub fn check_feasible(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::Infeasible("K >= 2".into()));
        }
        if !(self.e_f > 0.0 && self.e_f < 1.0) {
            return Err(Error::Infeasible("0 < e_f < 1".into()));
        }
        let wrong = (self.e_f * self.m as f64).round() as usize;
        if wrong == 0 || wrong == self.m {
            return Err(Error::Infeasible("1 <= round(e_f m) <= m - 1".into()));
        }
        if self.members == Some(0) {
            return Err(Error::Infeasible("N >= 1".into()));
        }
        let cap = 1.0 - 1.0 / k as f64;
        let s2 = self.regime.sigma2();
        if !(s2 >= 0.0 && s2 <= cap) {
            return Err(Error::Infeasible(format!("0 <= sigma2 <= 1 - 1/K = {cap}")));
        }
        let c = self.regime.confident_fraction();
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Infeasible("0 <= confident_fraction <= 1".into()));
        }
        match self.regime {
            Regime::Idealized {
                nu, beta, gamma_pseudo, ..
            } => {
                for (name, v) in [("nu", nu), ("beta", beta), ("gamma_pseudo", gamma_pseudo)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Infeasible(format!("0 <= {name} <= 1")));
                    }
                }
            }
            Regime::Relaxed { nu_bar, gamma_agree, .. } => {
                if !(0.0..=0.5).contains(&nu_bar) {
                    return Err(Error::Infeasible("0 <= 2 nu_bar <= 1".into()));
                }
                if !(0.0..=1.0).contains(&gamma_agree) {
                    return Err(Error::Infeasible("0 <= gamma_agree <= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// A labeled instance plus the rule producing each iteration's ensemble.
#[derive(Debug, Clone)]
pub struct SyntheticProcess {
    spec: SyntheticEnsembleSpec,
    true_labels: Vec<usize>,
    f_labels: Vec<usize>,
}

pub fn gen_synthetic_process(spec: &SyntheticEnsembleSpec) -> Result<SyntheticProcess> {
    spec.check_feasible()?;
    let k = spec.num_classes;
    let mut rng = stream(spec.seed, &[TAG_SIM, 0]);
    let true_labels: Vec<usize> = (0..spec.m).map(|_| rng.random_range(0..k)).collect();
    let mut order: Vec<usize> = (0..spec.m).collect();
    order.shuffle(&mut rng);
    let wrong = (spec.e_f * spec.m as f64).round() as usize;
    let mut f_labels = true_labels.clone();
    for &j in &order[..wrong] {
        let r = rng.random_range(0..k - 1);
        f_labels[j] = if r >= true_labels[j] { r + 1 } else { r };
    }
    Ok(SyntheticProcess {
        spec: spec.clone(),
        true_labels,
        f_labels,
    })
}

fn spread(row: &mut [f64], keep: usize, mass: f64) {
    let others = row.len() - 1;
    for (c, v) in row.iter_mut().enumerate() {
        if c != keep {
            *v += mass / others as f64;
        }
    }
}

impl SyntheticProcess {
    pub fn spec(&self) -> &SyntheticEnsembleSpec {
        &self.spec
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn f_labels(&self) -> &[usize] {
        &self.f_labels
    }

    pub fn misclassified(&self) -> Vec<usize> {
        misclassified(&self.f_labels, &self.true_labels).unwrap_or_default()
    }

    /// Splits `points` by a per-iteration hash order: the first
    /// `ceil(fraction * n)` go to the first group.
    fn split_by_hash(&self, points: &[usize], fraction: f64, role: u64, iteration: usize) -> (Vec<usize>, Vec<usize>) {
        let mut ranked: Vec<(u64, usize)> = points
            .iter()
            .map(|&j| (derive_seed(self.spec.seed, &[TAG_SIM, role, iteration as u64, j as u64]), j))
            .collect();
        ranked.sort_unstable();
        let take = ((fraction * points.len() as f64).ceil() as usize).min(points.len());
        let mut first: Vec<usize> = ranked[..take].iter().map(|e| e.1).collect();
        let mut second: Vec<usize> = ranked[take..].iter().map(|e| e.1).collect();
        first.sort_unstable();
        second.sort_unstable();
        (first, second)
    }

    /// Exact per-point distributions of `h(x)` for one iteration.
    pub fn distribution(&self, iteration: usize, pseudo: &PseudoLabelSet) -> Result<DenseMatrix> {
        pseudo.validate(&self.f_labels, self.spec.num_classes)?;
        let k = self.spec.num_classes;
        let m = self.spec.m;
        let mut data = vec![0.0; m * k];
        let correct: Vec<usize> = (0..m).filter(|&j| self.f_labels[j] == self.true_labels[j]).collect();
        let rest: Vec<usize> = (0..m)
            .filter(|&j| self.f_labels[j] != self.true_labels[j] && pseudo.label_of(j).is_none())
            .collect();

        let (nu_hi, nu_lo_group) = match self.spec.regime {
            Regime::Idealized { nu, .. } => (nu, Vec::new()),
            Regime::Relaxed { nu_bar, .. } => (2.0 * nu_bar, self.split_by_hash(&correct, 0.5, 1, iteration).1),
        };
        for &j in &correct {
            let err = if nu_lo_group.binary_search(&j).is_ok() { 0.0 } else { nu_hi };
            let row = &mut data[j * k..(j + 1) * k];
            let y = self.true_labels[j];
            row[y] = 1.0 - err;
            spread(row, y, err);
        }

        for &(j, pl) in pseudo.entries() {
            if self.f_labels[j] == self.true_labels[j] {
                continue;
            }
            let row = &mut data[j * k..(j + 1) * k];
            let on_f = match self.spec.regime {
                Regime::Idealized { gamma_pseudo, .. } => gamma_pseudo,
                Regime::Relaxed { gamma_agree, .. } => gamma_agree,
            };
            row[pl] = 1.0 - on_f;
            row[self.f_labels[j]] = on_f;
        }

        let (confident, others) = self.split_by_hash(&rest, self.spec.regime.confident_fraction(), 2, iteration);
        let beta = match self.spec.regime {
            Regime::Idealized { beta, .. } => beta,
            Regime::Relaxed { nu_bar, .. } => nu_bar,
        };
        for &j in &confident {
            let row = &mut data[j * k..(j + 1) * k];
            let y = self.true_labels[j];
            row[y] = 1.0 - beta;
            row[self.f_labels[j]] = beta;
        }
        let q = self.spec.regime.sigma2() / (1.0 - 1.0 / k as f64);
        let (uniform, on_f) = self.split_by_hash(&others, q, 3, iteration);
        for &j in &uniform {
            data[j * k..(j + 1) * k].iter_mut().for_each(|v| *v = 1.0 / k as f64);
        }
        for &j in &on_f {
            data[j * k + self.f_labels[j]] = 1.0;
        }
        DenseMatrix::new(m, k, data)
    }

    /// Vote fractions of `n` members drawn independently at every point.
    fn sample(&self, probs: &DenseMatrix, n: usize, iteration: usize) -> Result<LabelDistribution> {
        let k = probs.cols();
        let mut data = vec![0.0; probs.rows() * k];
        for (j, row) in probs.iter_rows().enumerate() {
            let dist = WeightedIndex::new(row).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let mut rng = stream(self.spec.seed, &[TAG_SIM, 4, iteration as u64, j as u64]);
            for _ in 0..n {
                data[j * k + dist.sample(&mut rng)] += 1.0;
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        LabelDistribution::new(DenseMatrix::new(probs.rows(), k, data)?, Some(n))
    }
}

impl EnsembleTrainer for SyntheticProcess {
    fn ensemble(&mut self, iteration: usize, pseudo: &PseudoLabelSet) -> Result<LabelDistribution> {
        let probs = self.distribution(iteration, pseudo)?;
        match self.spec.members {
            None => LabelDistribution::new(probs, None),
            Some(n) => self.sample(&probs, n, iteration),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    /// The two sides are equal up to rounding; counted as a pass.
    pub boundary: bool,
}

const BOUNDARY_TOL: f64 = 1e-9;

fn check_le(name: &str, lhs: f64, rhs: f64) -> Check {
    let boundary = (lhs - rhs).abs() <= BOUNDARY_TOL * rhs.abs().max(1.0);
    Check {
        name: name.into(),
        lhs,
        rhs,
        pass: lhs <= rhs || boundary,
        boundary,
    }
}

/// Conditions the one-step lemma is stated in terms of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaConditions {
    pub nu_bar: f64,
    pub gamma: f64,
    /// Mean `sigma_x^2` over `B_X`; zero when `B_X` is empty.
    pub sigma2: f64,
}

pub fn measure_lemma_conditions(
    votes: &LabelDistribution,
    f_labels: &[usize],
    true_labels: &[usize],
    pseudo: &PseudoLabelSet,
) -> Result<LemmaConditions> {
    let (nu_bar, _) = measure_nu(votes, f_labels, true_labels)?;
    let r_x = pseudo.indices();
    let gamma = measure_gamma(votes, f_labels, &r_x)?.value;
    let (_, b) = partition_gb(votes, f_labels, true_labels, &r_x, nu_bar)?;
    Ok(LemmaConditions {
        nu_bar,
        gamma,
        sigma2: measure_sigma2(votes, &b).unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub eta: f64,
    pub tau: f64,
    pub conditions: LemmaConditions,
    pub preconditions_hold: bool,
    pub checks: Vec<Check>,
    pub new_r: PseudoLabelSet,
}

impl LemmaReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Builds `R'` from the ensemble with `tau = sqrt(1 - eta)` and evaluates the
/// four inequalities of the one-step lemma, using `assumed` in place of the
/// measured conditions.
#[allow(clippy::too_many_arguments)]
pub fn check_lemma_construct_r(
    votes: &LabelDistribution,
    f_labels: &[usize],
    true_labels: &[usize],
    pseudo: &PseudoLabelSet,
    eta: f64,
    assumed: LemmaConditions,
    seed: u64,
    iteration: usize,
) -> Result<LemmaReport> {
    if !(eta > 0.0 && eta < 1.0) {
        return invalid("eta must lie in (0, 1)");
    }
    let tau = (1.0 - eta).sqrt();
    let new_r = construct_r_threshold(votes, f_labels, tau, seed, iteration)?;
    let new_idx = new_r.indices();
    let in_new = |j: &usize| new_idx.binary_search(j).is_ok();
    let r_x = pseudo.indices();
    let correct: Vec<usize> = (0..f_labels.len()).filter(|&j| f_labels[j] == true_labels[j]).collect();
    let (g, b) = partition_gb(votes, f_labels, true_labels, &r_x, assumed.nu_bar)?;

    let c = assumed;
    let checks = vec![
        check_le(
            "|R' ∩ (U \\ W)| <= nu / (1 - tau) |U \\ W|",
            correct.iter().filter(|j| in_new(j)).count() as f64,
            c.nu_bar / (1.0 - tau) * correct.len() as f64,
        ),
        check_le(
            "(1 - gamma / tau) |R| <= |R ∩ R'|",
            (1.0 - c.gamma / tau) * r_x.len() as f64,
            r_x.iter().filter(|j| in_new(j)).count() as f64,
        ),
        check_le("|G \\ R'| <= 0", g.iter().filter(|j| !in_new(j)).count() as f64, 0.0),
        check_le(
            "(sigma2 - eta) / (1 - eta) |B| <= |R' ∩ B|",
            (c.sigma2 - eta) / (1.0 - eta) * b.len() as f64,
            b.iter().filter(|j| in_new(j)).count() as f64,
        ),
    ];
    Ok(LemmaReport {
        eta,
        tau,
        conditions: c,
        preconditions_hold: eta < c.sigma2.min(1.0 - c.nu_bar * c.nu_bar),
        checks,
        new_r,
    })
}

/// [`check_lemma_construct_r`] with the conditions measured on the instance.
pub fn verify_lemma_construct_r(
    votes: &LabelDistribution,
    f_labels: &[usize],
    true_labels: &[usize],
    pseudo: &PseudoLabelSet,
    eta: f64,
    seed: u64,
    iteration: usize,
) -> Result<LemmaReport> {
    let measured = measure_lemma_conditions(votes, f_labels, true_labels, pseudo)?;
    check_lemma_construct_r(votes, f_labels, true_labels, pseudo, eta, measured, seed, iteration)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// `|W_X \ R_X|` before the first iteration and after each one.
    pub trace: Vec<usize>,
    /// `slack (1 - sigma2_l)^t |W_X|`.
    pub bound: Vec<f64>,
    pub holds: bool,
    pub slack: f64,
    pub final_r: PseudoLabelSet,
}

/// Runs threshold self-training with `tau = sqrt(1 - eta)` on the process and
/// compares the residual with geometric decay at rate `sigma2_l`; the slack
/// is 1 in probability mode and 1.05 in sampling mode.
pub fn verify_geometric_convergence(
    process: &mut SyntheticProcess,
    iterations: usize,
    eta: f64,
    sigma2_l: f64,
) -> Result<ConvergenceTrace> {
    if !(eta > 0.0 && eta < 1.0) {
        return invalid("eta must lie in (0, 1)");
    }
    let tau = (1.0 - eta).sqrt();
    let slack = if process.spec.members.is_some() { 1.05 } else { 1.0 };
    let w = process.misclassified();
    let residual = |r: &PseudoLabelSet| w.iter().filter(|&&j| r.label_of(j).is_none()).count();
    let mut r = PseudoLabelSet::empty();
    let mut trace = vec![w.len()];
    for t in 0..iterations {
        let votes = process.ensemble(t, &r)?;
        r = construct_r_threshold(&votes, process.f_labels(), tau, process.spec.seed, t)?;
        trace.push(residual(&r));
    }
    let bound: Vec<f64> = (0..trace.len())
        .map(|t| slack * (1.0 - sigma2_l).powi(t as i32) * w.len() as f64)
        .collect();
    let holds = trace.iter().zip(&bound).all(|(&n, &b)| n as f64 <= b);
    Ok(ConvergenceTrace {
        trace,
        bound,
        holds,
        slack,
        final_r: r,
    })
}

/// One failed inequality of a sweep trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub trial: usize,
    pub num_classes: usize,
    pub eta: f64,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub trials: usize,
    pub m: usize,
    /// Trials per class count, in the order given.
    pub per_classes: Vec<(usize, usize)>,
    /// Draws discarded because the measured conditions left no admissible `eta`.
    pub redraws: usize,
    pub boundary_hits: usize,
    pub violations: usize,
    pub failures: Vec<SweepFailure>,
}

const SWEEP_ATTEMPTS: usize = 64;

fn sweep_trial(trial: usize, m: usize, k: usize, seed: u64) -> Result<(LemmaReport, usize)> {
    let mut rng = stream(seed, &[TAG_SIM, 100, trial as u64]);
    let max_div = 1.0 - 1.0 / k as f64;
    for attempt in 0..SWEEP_ATTEMPTS {
        let sigma2 = rng.random_range(0.2..1.0) * max_div;
        let confident_fraction = rng.random_range(0.0..0.5);
        let regime = if rng.random_bool(0.5) {
            Regime::Idealized {
                nu: rng.random_range(0.0..0.1),
                beta: rng.random_range(0.0..0.1),
                gamma_pseudo: rng.random_range(0.0..0.1),
                sigma2,
                confident_fraction,
            }
        } else {
            Regime::Relaxed {
                nu_bar: rng.random_range(0.0..0.1),
                gamma_agree: rng.random_range(0.0..0.1),
                sigma2,
                confident_fraction,
            }
        };
        let spec = SyntheticEnsembleSpec {
            m,
            num_classes: k,
            e_f: rng.random_range(0.1..0.5),
            regime,
            members: None,
            seed: rng.random(),
        };
        let mut process = match gen_synthetic_process(&spec) {
            Ok(p) => p,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        };
        // a previous round supplies R_X so the gamma condition is exercised
        let first = process.ensemble(0, &PseudoLabelSet::empty())?;
        let r = construct_r_threshold(&first, process.f_labels(), rng.random_range(0.5..0.95), spec.seed, 0)?;
        let votes = process.ensemble(1, &r)?;
        let c = measure_lemma_conditions(&votes, process.f_labels(), process.true_labels(), &r)?;
        let cap = c.sigma2.min(1.0 - c.nu_bar * c.nu_bar);
        if cap <= 1e-6 {
            continue;
        }
        let eta = rng.random_range(0.05..0.95) * cap;
        let report = verify_lemma_construct_r(&votes, process.f_labels(), process.true_labels(), &r, eta, spec.seed, 1)?;
        if report.preconditions_hold {
            return Ok((report, attempt));
        }
    }
    Err(Error::Infeasible(format!(
        "trial {trial}: no admissible instance in {SWEEP_ATTEMPTS} draws"
    )))
}

/// Draws `trials` random simulator instances in probability mode (class
/// counts cycle through `classes`), picks an admissible `eta` for each from
/// the measured conditions and runs the one-step lemma checks.
pub fn lemma_sweep(trials: usize, m: usize, classes: &[usize], seed: u64) -> Result<SweepSummary> {
    if classes.is_empty() || classes.iter().any(|&k| k < 2) {
        return invalid("classes must be non-empty and every K >= 2");
    }
    if m < 10 {
        return invalid("m must be at least 10");
    }
    let results: Vec<(usize, usize, LemmaReport, usize)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let k = classes[i % classes.len()];
            sweep_trial(i, m, k, seed).map(|(rep, redraws)| (i, k, rep, redraws))
        })
        .collect::<Result<_>>()?;
    let mut summary = SweepSummary {
        trials,
        m,
        per_classes: classes.iter().map(|&k| (k, 0)).collect(),
        redraws: 0,
        boundary_hits: 0,
        violations: 0,
        failures: Vec::new(),
    };
    for (trial, k, rep, redraws) in results {
        if let Some(slot) = summary.per_classes.iter_mut().find(|(c, _)| *c == k) {
            slot.1 += 1;
        }
        summary.redraws += redraws;
        summary.boundary_hits += rep.checks.iter().filter(|c| c.boundary).count();
        for check in rep.checks.into_iter().filter(|c| !c.pass) {
            summary.violations += 1;
            summary.failures.push(SweepFailure {
                trial,
                num_classes: k,
                eta: rep.eta,
                check,
            });
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framework::{run_self_training, FrameworkConfig, SelectionMode};
    use crate::metrics::measure_nu;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn theorem_perfect_conditions() {
        let b = theorem1_bounds(&BoundInputs::new(0.0, 0.0, 0.8, 0.3).with_eta_delta(0.16, 0.05)).unwrap();
        assert_eq!((b.epsilon, b.acc_err_bound), (0.0, 0.0));
        assert!(b.preconditions_hold());
        assert_eq!(b.max_iterations, Some(20));
    }

    #[test]
    fn theorem_hand_example() {
        let b = theorem1_bounds(&BoundInputs::new(0.0, 0.01, 0.8, 0.5).with_eta_delta(0.16, 0.05)).unwrap();
        let tau = 0.84f64.sqrt();
        assert!(close(b.tau, 0.916515, 1e-6));
        let g = 0.01 / tau;
        assert!(close(g, 0.010911, 1e-6));
        let eps = g / (0.2 - 0.05 + g);
        assert!(close(b.epsilon, eps, 1e-15) && close(b.epsilon, 0.0678, 1e-4));
        assert!(close(b.acc_err_bound, 0.0339, 1e-4));
    }

    #[test]
    fn theorem_rejects_zero_error() {
        assert!(theorem1_bounds(&BoundInputs::new(0.0, 0.01, 0.8, 0.0).with_eta_delta(0.16, 0.05)).is_err());
    }

    #[test]
    fn corollary_examples() {
        let b = corollary_bounds(&BoundInputs::new(0.0, 0.01, 0.64, 0.4)).unwrap();
        assert!(close(b.epsilon, 0.16 / 1.92, 1e-15));
        assert_eq!(b.acc_err_bound, b.epsilon * 0.4);
        assert_eq!(b.max_iterations, Some(75));
        let zero = corollary_bounds(&BoundInputs::new(0.0, 0.0, 0.64, 0.4)).unwrap();
        assert_eq!(zero.max_iterations, None);
        assert!(!zero.preconditions_hold());
    }

    #[test]
    fn measured_inputs_raise_flag_and_bound() {
        let inputs = BoundInputs::new(0.0315, 0.0057, 0.2654, 0.7281);
        let c = corollary_bounds(&inputs).unwrap();
        let eps = 16.0 * 0.0057 / (3.0 * 0.2654) * (1.0 + 4.0 * 0.0315 * 0.2719 / 0.7281);
        assert!(close(c.epsilon, eps, 1e-15));
        assert!(close(c.acc_err_bound, eps * 0.7281, 1e-15));
        assert!(c.acc_err_bound > 0.0031);
        assert!(c.violated_preconditions.iter().any(|v| v.contains("7/12")));
        let t = theorem1_bounds(&inputs.with_eta_delta(7.0 / 16.0, 4.0 * 0.0057 / 3.0)).unwrap();
        assert!(!t.preconditions_hold());
    }

    #[test]
    fn corollary_is_theorem_special_case() {
        let inputs = BoundInputs::new(0.02, 0.01, 0.6, 0.3);
        let c = corollary_bounds(&inputs).unwrap();
        let t = theorem1_bounds(&inputs.clone().with_eta_delta(7.0 / 16.0, 4.0 * 0.01 / 3.0)).unwrap();
        assert_eq!(t.tau, 0.75);
        assert!(close(c.epsilon, t.epsilon, 1e-12));
        assert!(close(c.acc_err_bound, t.acc_err_bound, 1e-12));
        assert!(close(c.sym_diff_bound, t.sym_diff_bound, 1e-12));
    }

    #[test]
    fn idealized_examples() {
        let mut inputs = BoundInputs::new(0.0, 0.0, 0.5, 0.3);
        inputs.num_classes = 3;
        let b = idealized_bounds(&inputs, 0.5, 0.25).unwrap();
        assert_eq!(b.t_needed, 10);
        assert_eq!(b.eta_lo, 0.0);
        assert_eq!(b.b, Some(2.0));
        inputs.nu_tilde = 0.1;
        let b = idealized_bounds(&inputs, 0.6, 0.5).unwrap();
        assert!(close(b.b.unwrap(), 1.01, 1e-12));
        assert!(close(b.eta_hi.unwrap(), (1.01f64 / 3.0).min(2.0 / 3.0), 1e-12));
        inputs.epsilon_target = 1.0;
        assert!(idealized_bounds(&inputs, 0.6, 0.5).is_err());
    }

    #[test]
    fn idealized_cap_and_empty_interval() {
        let mut inputs = BoundInputs::new(0.0, 0.0, 0.5, 0.3);
        inputs.num_classes = 2;
        // b / K = 2 so the 1 - 1/K cap binds
        let b = idealized_bounds(&inputs, 0.5, 0.125).unwrap();
        assert_eq!(b.eta_hi, Some(0.5));
        inputs.nu_tilde = 0.3;
        let b = idealized_bounds(&inputs, 0.2, 0.5).unwrap();
        assert!(b.empty_interval && !b.violated_preconditions.is_empty());
    }

    fn ideal_spec(k: usize, sigma2: f64, members: Option<usize>) -> SyntheticEnsembleSpec {
        SyntheticEnsembleSpec {
            m: 4000,
            num_classes: k,
            e_f: 0.2,
            regime: Regime::Idealized {
                nu: 0.0,
                beta: 0.0,
                gamma_pseudo: 0.0,
                sigma2,
                confident_fraction: 0.0,
            },
            members,
            seed: 5,
        }
    }

    #[test]
    fn max_diversity_is_uniform() {
        let spec = ideal_spec(4, 0.75, None);
        let mut p = gen_synthetic_process(&spec).unwrap();
        let v = p.ensemble(0, &PseudoLabelSet::empty()).unwrap();
        for j in p.misclassified() {
            assert!(v.row(j).iter().all(|&x| x == 0.25));
        }
    }

    #[test]
    fn infeasible_targets_are_named() {
        let spec = ideal_spec(2, 0.7, None);
        match gen_synthetic_process(&spec) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("1 - 1/K")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relaxed_targets_are_hit() {
        let spec = SyntheticEnsembleSpec {
            m: 10_000,
            num_classes: 3,
            e_f: 0.3,
            regime: Regime::Relaxed {
                nu_bar: 0.05,
                gamma_agree: 0.02,
                sigma2: 0.4,
                confident_fraction: 0.2,
            },
            members: Some(50),
            seed: 3,
        };
        let mut p = gen_synthetic_process(&spec).unwrap();
        let v = p.ensemble(0, &PseudoLabelSet::empty()).unwrap();
        let (nu_bar, _) = measure_nu(&v, p.f_labels(), p.true_labels()).unwrap();
        assert!(close(nu_bar, 0.05, 0.01), "{nu_bar}");
        let mut exact = spec.clone();
        exact.members = None;
        let mut pe = gen_synthetic_process(&exact).unwrap();
        let ve = pe.ensemble(0, &PseudoLabelSet::empty()).unwrap();
        let c = measure_lemma_conditions(&ve, pe.f_labels(), pe.true_labels(), &PseudoLabelSet::empty()).unwrap();
        assert!(close(c.sigma2, 0.4, 0.02), "{}", c.sigma2);
    }

    #[test]
    fn lemma_holds_for_truth_ensemble() {
        let y = vec![0, 1, 2, 1];
        let f = vec![0, 2, 2, 0];
        let v = LabelDistribution::new(
            DenseMatrix::new(
                4,
                3,
                y.iter().flat_map(|&t| (0..3).map(move |c| if c == t { 1.0 } else { 0.0 })).collect(),
            )
            .unwrap(),
            None,
        )
        .unwrap();
        let rep = verify_lemma_construct_r(&v, &f, &y, &PseudoLabelSet::empty(), 0.3, 0, 0).unwrap();
        assert!(rep.all_pass());
        assert_eq!(rep.new_r.indices(), vec![1, 3]);
    }

    #[test]
    fn lemma_fault_injection_reports_gamma_check() {
        // R holds point 1 but the ensemble fully agrees with f there
        let y = vec![0, 1];
        let f = vec![0, 0];
        let v = LabelDistribution::new(DenseMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(), None).unwrap();
        let r = PseudoLabelSet::new(vec![(1, 1)]).unwrap();
        let measured = measure_lemma_conditions(&v, &f, &y, &r).unwrap();
        assert_eq!(measured.gamma, 1.0);
        let fake = LemmaConditions { gamma: 0.0, ..measured };
        let rep = check_lemma_construct_r(&v, &f, &y, &r, 0.3, fake, 0, 0).unwrap();
        let failed = rep.failures();
        assert_eq!(failed.len(), 1);
        assert!(failed[0].name.contains("gamma"));
        assert_eq!((failed[0].lhs, failed[0].rhs), (1.0, 0.0));
        assert!(verify_lemma_construct_r(&v, &f, &y, &r, 0.3, 0, 0).unwrap().all_pass());
    }

    #[test]
    fn geometric_convergence_probability_mode() {
        let mut spec = ideal_spec(3, 0.5, None);
        spec.e_f = 0.2;
        let mut p = gen_synthetic_process(&spec).unwrap();
        assert_eq!(p.misclassified().len(), 800);
        let tr = verify_geometric_convergence(&mut p, 10, 0.25, 0.5).unwrap();
        assert!(tr.holds);
        assert!(tr.trace[3] <= 100);
        assert!(tr.trace[10] as f64 <= 0.01 * 800.0);
    }

    #[test]
    fn geometric_convergence_sampling_mode() {
        let mut spec = ideal_spec(3, 0.5, Some(5));
        spec.m = 10_000;
        let mut p = gen_synthetic_process(&spec).unwrap();
        let tr = verify_geometric_convergence(&mut p, 10, 0.25, 0.5).unwrap();
        assert!(tr.holds, "{:?}", tr.trace);
    }

    #[test]
    fn no_diversity_no_progress() {
        let mut p = gen_synthetic_process(&ideal_spec(3, 1e-4, None)).unwrap();
        let tr = verify_geometric_convergence(&mut p, 5, 0.25, 1e-4).unwrap();
        assert!(tr.trace[5] as f64 >= 0.99 * tr.trace[0] as f64);
    }

    #[test]
    fn small_sweep_is_clean_and_deterministic() {
        let a = lemma_sweep(12, 400, &[2, 3, 10], 7).unwrap();
        assert_eq!(a.violations, 0, "{:?}", a.failures);
        assert_eq!(a.per_classes, vec![(2, 4), (3, 4), (10, 4)]);
        assert_eq!(a, lemma_sweep(12, 400, &[2, 3, 10], 7).unwrap());
        assert!(lemma_sweep(3, 400, &[1], 0).is_err());
    }

    #[test]
    fn process_drives_framework_deterministically() {
        let spec = ideal_spec(3, 0.5, Some(7));
        let run = |spec: &SyntheticEnsembleSpec| {
            let mut p = gen_synthetic_process(spec).unwrap();
            let f = p.f_labels().to_vec();
            let cfg = FrameworkConfig {
                iterations: 3,
                mode: SelectionMode::Threshold { tau: 0.75 },
                seed: 1,
            };
            run_self_training(&mut p, &f, &cfg).unwrap().final_indices()
        };
        assert_eq!(run(&spec), run(&spec));
    }

    proptest! {
        #[test]
        fn epsilon_monotone(nu in 0.0f64..0.1, g in 0.0f64..0.05, s in 0.3f64..0.9, e_f in 0.05f64..0.9,
                            dn in 0.0f64..0.05, dg in 0.0f64..0.05, ds in 0.0f64..0.1) {
            let eps = |nu: f64, g: f64, s: f64| {
                theorem1_bounds(&BoundInputs::new(nu, g, s, e_f).with_eta_delta(0.2, 0.05)).unwrap().epsilon
            };
            let base = eps(nu, g, s);
            prop_assert!(eps(nu + dn, g, s) >= base - 1e-15);
            prop_assert!(eps(nu, g + dg, s) >= base - 1e-15);
            prop_assert!(eps(nu, g, s + ds) <= base + 1e-15);
        }
    }
}
