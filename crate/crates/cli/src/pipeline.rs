//! Data preparation, training of `f` and the per-method runs shared by all
//! commands.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use selftrain::baselines::{
    avg_conf, calibrate_threshold, ens_avg_conf, flag_below, max_probs, msp_detect, trust_score, BaselineOutput,
};
use selftrain::datagen::{
    apply_shift, gen_gaussian_mixture, gen_two_moons, load_csv, load_csv_features, LabeledDataset, ShiftSpec,
};
use selftrain::ensembles::{
    pretrain_ri, predict_all, EnsemblePredictions, EnsembleTrainer, FixedTrainer, LabelDistribution, RiTrainer,
    RmTrainer, TrainerKind, TrainerSpec,
};
use selftrain::framework::{run_self_training, FrameworkConfig, RunResult};
use selftrain::metrics::{accuracy, condition_report, estimation_error, f1_error_detection, misclassified, ConditionReport};
use selftrain::numkernel::{sgd_fit, Architecture, DenseMatrix, MlpModel, Objective, TrainConfig};
use selftrain::rng::derive_seed;

use crate::config::{DataSpec, Method, RunConfig};

// roles for seeds derived from the run seed
const ROLE_DATA: u64 = 1;
const ROLE_SHIFT: u64 = 2;
const ROLE_F_INIT: u64 = 3;
const ROLE_F_TRAIN: u64 = 4;
const ROLE_ENSEMBLE: u64 = 5;
const ROLE_LOOP: u64 = 6;
const ROLE_ENS_BASELINE: u64 = 7;

pub fn role_seed(seed: u64, role: u64) -> u64 {
    derive_seed(seed, &[role])
}

/// Source train `D`, source test `D_test` and target inputs `U_X`. The
/// target labels are present only in evaluation mode.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub source: LabeledDataset,
    pub source_test: LabeledDataset,
    pub target: DenseMatrix,
    pub target_labels: Option<Vec<usize>>,
    pub num_classes: usize,
    /// Shift magnitude applied to the target (generated data only).
    pub shift_magnitude: Option<f64>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Splits class-grouped rows into three parts by interleaving blocks of
/// sizes proportional to the three per-class counts.
fn interleaved_split(data: &LabeledDataset, counts: [usize; 3]) -> [Vec<usize>; 3] {
    let g = counts.iter().copied().fold(0, gcd).max(1);
    let block = counts.map(|c| c / g);
    let period: usize = block.iter().sum();
    let per_class: usize = counts.iter().sum();
    let mut parts: [Vec<usize>; 3] = Default::default();
    for i in 0..data.len() {
        let r = (i % per_class) % period;
        let part = if r < block[0] {
            0
        } else if r < block[0] + block[1] {
            1
        } else {
            2
        };
        parts[part].push(i);
    }
    parts
}

/// Generated data before the target shift is applied.
struct Pieces {
    source: LabeledDataset,
    source_test: LabeledDataset,
    target: LabeledDataset,
    shift: ShiftSpec,
    calibrate_accuracy: Option<f64>,
}

enum Built {
    Ready(Scenario),
    Unshifted(Pieces),
}

impl Pieces {
    fn finish(self, magnitude: f64, evaluation_mode: bool) -> Result<Scenario> {
        let spec = ShiftSpec { magnitude, ..self.shift };
        let shifted = apply_shift(&self.target, &spec)?;
        let target_labels = evaluation_mode.then(|| shifted.labels().to_vec());
        Ok(Scenario {
            num_classes: self.source.num_classes(),
            source: self.source,
            source_test: self.source_test,
            target: shifted.into_features(),
            target_labels,
            shift_magnitude: Some(magnitude),
        })
    }
}

fn build(data: &DataSpec, seed: u64, evaluation_mode: bool) -> Result<Built> {
    let data_seed = role_seed(seed, ROLE_DATA);
    let (pool, counts, shift, calibrate_accuracy) = match data {
        DataSpec::GaussianShift {
            num_classes,
            dim,
            train_per_class,
            test_per_class,
            target_per_class,
            separation,
            shift,
            calibrate_accuracy,
        } => {
            let counts = [*train_per_class, *test_per_class, *target_per_class];
            if counts.contains(&0) {
                bail!("train, test and target counts must all be positive");
            }
            let pool = gen_gaussian_mixture(*num_classes, *dim, counts.iter().sum(), *separation, data_seed)?;
            (pool, counts, shift, *calibrate_accuracy)
        }
        DataSpec::TwoMoons {
            train_per_class,
            test_per_class,
            target_per_class,
            noise_sd,
            shift,
        } => {
            let counts = [*train_per_class, *test_per_class, *target_per_class];
            if counts.contains(&0) {
                bail!("train, test and target counts must all be positive");
            }
            (gen_two_moons(counts.iter().sum(), *noise_sd, data_seed)?, counts, shift, None)
        }
        DataSpec::Csv {
            train,
            target,
            source_test,
            num_classes,
        } => {
            let all = load_csv(train, *num_classes).with_context(|| format!("loading {}", train.display()))?;
            let k = all.num_classes();
            let (source, source_test) = match source_test {
                Some(p) => (all, load_csv(p, Some(k)).with_context(|| format!("loading {}", p.display()))?),
                None => {
                    let keep: Vec<usize> = (0..all.len()).filter(|i| i % 5 != 4).collect();
                    all.split(&keep)
                }
            };
            let (target, target_labels) = if evaluation_mode {
                let t = load_csv(target, Some(k)).with_context(|| format!("loading {}", target.display()))?;
                let labels = t.labels().to_vec();
                (t.into_features(), Some(labels))
            } else {
                let t = load_csv_features(target).with_context(|| format!("loading {}", target.display()))?;
                (t, None)
            };
            if target.cols() != source.dim() {
                bail!("target has {} features but train has {}", target.cols(), source.dim());
            }
            return Ok(Built::Ready(Scenario {
                source,
                source_test,
                target,
                target_labels,
                num_classes: k,
                shift_magnitude: None,
            }));
        }
    };
    if let Some(a) = calibrate_accuracy {
        if !(0.0..=1.0).contains(&a) {
            bail!("calibrate_accuracy must lie in [0, 1]");
        }
    }
    let [a, b, c] = interleaved_split(&pool, counts);
    Ok(Built::Unshifted(Pieces {
        source: pool.select(&a),
        source_test: pool.select(&b),
        target: pool.select(&c),
        shift: shift.with_seed(role_seed(seed, ROLE_SHIFT)),
        calibrate_accuracy,
    }))
}

/// Builds the scenario with the configured shift magnitude; a requested
/// accuracy calibration is ignored here (see [`prepare`]).
pub fn build_scenario(data: &DataSpec, seed: u64, evaluation_mode: bool) -> Result<Scenario> {
    match build(data, seed, evaluation_mode)? {
        Built::Ready(s) => Ok(s),
        Built::Unshifted(p) => {
            let m = p.shift.magnitude;
            p.finish(m, evaluation_mode)
        }
    }
}

/// Bisects the shift magnitude in `[0, max]` so that `f`'s accuracy on the
/// shifted source test split approaches `goal`. Only source labels are read.
fn calibrate_magnitude(f: &MlpModel, probe: &LabeledDataset, shift: &ShiftSpec, goal: f64) -> Result<f64> {
    let acc_at = |magnitude: f64| -> Result<f64> {
        let shifted = apply_shift(probe, &ShiftSpec { magnitude, ..shift.clone() })?;
        Ok(accuracy(&f.predict(shifted.features())?, shifted.labels())?)
    };
    let (mut lo, mut hi) = (0.0, shift.magnitude);
    if acc_at(lo)? <= goal {
        return Ok(lo);
    }
    if acc_at(hi)? > goal {
        return Ok(hi);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if acc_at(mid)? > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// The scenario together with the trained `f` and its outputs on `U_X`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub architecture: Architecture,
    pub f: MlpModel,
    pub f_labels: Vec<usize>,
    pub f_probs: DenseMatrix,
    pub seed: u64,
}

impl Prepared {
    pub fn num_points(&self) -> usize {
        self.f_labels.len()
    }

    /// `f`'s error rate on `D_test`.
    pub fn source_error(&self) -> Result<f64> {
        let pred = self.f.predict(self.scenario.source_test.features())?;
        Ok(1.0 - accuracy(&pred, self.scenario.source_test.labels())?)
    }

    fn true_labels(&self, what: &str) -> Result<&[usize]> {
        match &self.scenario.target_labels {
            Some(y) => Ok(y),
            None => bail!("{what} needs evaluation mode (--eval)"),
        }
    }
}

fn train_f(cfg: &RunConfig, source: &LabeledDataset, architecture: &Architecture) -> Result<MlpModel> {
    let k = architecture.num_classes;
    if let Some(path) = &cfg.model.load {
        let text = std::fs::read_to_string(path).with_context(|| format!("stage model: reading {}", path.display()))?;
        let m: MlpModel =
            serde_json::from_str(&text).with_context(|| format!("stage model: parsing {}", path.display()))?;
        if m.input_dim() != source.dim() || m.num_classes() != k {
            bail!(
                "stage model: loaded model maps {} features to {} classes, data has {} and {}",
                m.input_dim(),
                m.num_classes(),
                source.dim(),
                k
            );
        }
        return Ok(m);
    }
    let init = MlpModel::init(architecture, role_seed(cfg.seed, ROLE_F_INIT)).context("stage model")?;
    let train = TrainConfig {
        seed: role_seed(cfg.seed, ROLE_F_TRAIN),
        ..cfg.model.train.clone()
    };
    sgd_fit(&init, &Objective::supervised(source), &train).context("stage pretrain")
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let built = build(&cfg.data, cfg.seed, cfg.evaluation_mode).context("stage data")?;
    let (source, k) = match &built {
        Built::Ready(s) => (&s.source, s.num_classes),
        Built::Unshifted(p) => (&p.source, p.source.num_classes()),
    };
    let architecture = Architecture::new(source.dim(), &cfg.model.encoder, &cfg.model.predictor_hidden, k);
    let f = train_f(cfg, source, &architecture)?;
    let scenario = match built {
        Built::Ready(s) => s,
        Built::Unshifted(p) => {
            let magnitude = match p.calibrate_accuracy {
                Some(goal) => calibrate_magnitude(&f, &p.source_test, &p.shift, goal).context("stage data")?,
                None => p.shift.magnitude,
            };
            p.finish(magnitude, cfg.evaluation_mode).context("stage data")?
        }
    };
    let f_probs = f.predict_proba(&scenario.target).context("stage predict")?;
    let f_labels = f.predict(&scenario.target).context("stage predict")?;
    Ok(Prepared {
        scenario,
        architecture,
        f,
        f_labels,
        f_probs,
        seed: cfg.seed,
    })
}

pub fn trainer_spec(cfg: &RunConfig, prep: &Prepared, kind: TrainerKind) -> TrainerSpec {
    let mut spec = TrainerSpec::new(
        kind,
        prep.architecture.clone(),
        TrainConfig {
            seed: role_seed(cfg.seed, ROLE_ENSEMBLE),
            ..cfg.model.train.clone()
        },
    );
    spec.members = cfg.ensemble.members;
    spec.pseudo_weight = cfg.ensemble.pseudo_weight;
    spec.alpha = cfg.ensemble.alpha;
    spec.finetune_learning_rate = cfg.ensemble.finetune_learning_rate;
    spec
}

fn one_hot(labels: &[usize], k: usize) -> Result<LabelDistribution> {
    let data = labels
        .iter()
        .flat_map(|&y| (0..k).map(move |c| if c == y { 1.0 } else { 0.0 }))
        .collect();
    Ok(LabelDistribution::new(DenseMatrix::new(labels.len(), k, data)?, Some(1))?)
}

/// Result of one method on one prepared scenario.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub estimated_accuracy: f64,
    pub flagged: Vec<usize>,
    pub baseline: Option<BaselineOutput>,
    pub run: Option<RunResult>,
    pub predictions: Option<EnsemblePredictions>,
}

pub fn run_method(cfg: &RunConfig, prep: &Prepared, method: Method) -> Result<MethodOutcome> {
    let m = prep.num_points();
    let k = prep.scenario.num_classes;
    let framework = FrameworkConfig {
        iterations: cfg.self_training.iterations,
        mode: cfg.self_training.mode,
        seed: role_seed(cfg.seed, ROLE_LOOP),
    };
    let self_train = |trainer: &mut dyn EnsembleTrainer| -> Result<MethodOutcome> {
        let run = run_self_training(trainer, &prep.f_labels, &framework).context("stage self-training")?;
        Ok(MethodOutcome {
            method,
            estimated_accuracy: run.estimated_accuracy,
            flagged: run.final_indices(),
            baseline: None,
            predictions: trainer.last_predictions().cloned(),
            run: Some(run),
        })
    };
    let detection = |out: BaselineOutput| MethodOutcome {
        method,
        estimated_accuracy: out.estimated_accuracy.unwrap_or(f64::NAN),
        flagged: out.flagged_indices.clone().unwrap_or_default(),
        baseline: Some(out),
        run: None,
        predictions: None,
    };
    let sc = &prep.scenario;
    match method {
        Method::OursRi => {
            let spec = trainer_spec(cfg, prep, TrainerKind::Ri);
            let mut t = RiTrainer::new(sc.source.clone(), sc.target.clone(), spec).context("stage ensemble")?;
            self_train(&mut t)
        }
        Method::OursRm => {
            let spec = trainer_spec(cfg, prep, TrainerKind::Rm);
            let mut t =
                RmTrainer::new(sc.source.clone(), sc.target.clone(), spec, prep.f.clone()).context("stage ensemble")?;
            self_train(&mut t)
        }
        Method::Oracle => {
            let y = prep.true_labels("the oracle method")?;
            self_train(&mut FixedTrainer::new(one_hot(y, k)?))
        }
        Method::Identity => self_train(&mut FixedTrainer::new(one_hot(&prep.f_labels, k)?)),
        Method::AvgConf => {
            let v = avg_conf(&prep.f_probs).context("stage baseline")?;
            let out = BaselineOutput::estimate(method.name(), v);
            Ok(MethodOutcome {
                flagged: Vec::new(),
                ..detection(out)
            })
        }
        Method::EnsAvgConf => {
            let mut spec = trainer_spec(cfg, prep, TrainerKind::Ri);
            spec.train.seed = role_seed(cfg.seed, ROLE_ENS_BASELINE);
            let members = pretrain_ri(&sc.source, &spec).context("stage baseline")?;
            let preds = predict_all(&members, &sc.target).context("stage baseline")?;
            let out = BaselineOutput::estimate(method.name(), ens_avg_conf(&preds)?);
            Ok(MethodOutcome {
                flagged: Vec::new(),
                predictions: Some(preds),
                ..detection(out)
            })
        }
        Method::Msp => {
            let test_probs = prep.f.predict_proba(sc.source_test.features())?;
            let th = calibrate_threshold(&max_probs(&test_probs), prep.source_error()?).context("stage baseline")?;
            let flagged = msp_detect(&prep.f_probs, th)?;
            Ok(detection(BaselineOutput::detection(method.name(), flagged, th, m)))
        }
        Method::TrustScore => {
            let train_rep = prep.f.represent(sc.source.features())?;
            let test_rep = prep.f.represent(sc.source_test.features())?;
            let test_pred = prep.f.predict(sc.source_test.features())?;
            let target_rep = prep.f.represent(&sc.target)?;
            let calib = trust_score(&train_rep, sc.source.labels(), k, &test_rep, &test_pred, cfg.trust_k)
                .context("stage baseline")?;
            let th = calibrate_threshold(&calib, prep.source_error()?)?;
            let scores = trust_score(&train_rep, sc.source.labels(), k, &target_rep, &prep.f_labels, cfg.trust_k)
                .context("stage baseline")?;
            let mut out = BaselineOutput::detection(method.name(), flag_below(&scores, th), th, m);
            out.note = Some("scores computed on the encoder output of f".into());
            Ok(detection(out))
        }
    }
}

/// Quantities that need the true target labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub true_accuracy: f64,
    pub estimation_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub num_errors: usize,
    /// Estimation error after each iteration (self-training methods).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub estimation_error_by_iteration: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub f1_by_iteration: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionReport>,
}

/// `None` outside evaluation mode. F1 is reported for detecting methods only.
pub fn evaluate(prep: &Prepared, outcome: &MethodOutcome, with_conditions: bool) -> Result<Option<Evaluation>> {
    let Some(y) = prep.scenario.target_labels.as_deref() else {
        return Ok(None);
    };
    let w = misclassified(&prep.f_labels, y)?;
    let detects = !matches!(outcome.method, Method::AvgConf | Method::EnsAvgConf);
    let (by_iter, f1_iter) = match &outcome.run {
        Some(run) => (
            (1..=run.iterations.len())
                .map(|t| estimation_error(run.estimate_at(t), &prep.f_labels, y))
                .collect::<selftrain::Result<Vec<_>>>()?,
            run.iterations.iter().map(|r| f1_error_detection(&r.indices, &w)).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let conditions = match (&outcome.run, with_conditions) {
        (Some(run), true) => Some(condition_report(run, &prep.f_labels, y).context("stage conditions")?),
        _ => None,
    };
    Ok(Some(Evaluation {
        true_accuracy: accuracy(&prep.f_labels, y)?,
        estimation_error: estimation_error(outcome.estimated_accuracy, &prep.f_labels, y)?,
        f1: detects.then(|| f1_error_detection(&outcome.flagged, &w)),
        num_errors: w.len(),
        estimation_error_by_iteration: by_iter,
        f1_by_iteration: f1_iter,
        conditions,
    }))
}
