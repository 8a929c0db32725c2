//! Run configuration: a JSON document, optionally patched with `key=value`
//! overrides addressed by dotted paths, then validated against a strict
//! schema in which unknown keys are errors.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use selftrain::datagen::{ShiftKind, ShiftSpec};
use selftrain::ensembles::TrainerKind;
use selftrain::framework::SelectionMode;
use selftrain::numkernel::TrainConfig;
use selftrain::theorylab::{BoundInputs, SyntheticEnsembleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OursRi,
    OursRm,
    AvgConf,
    EnsAvgConf,
    Msp,
    TrustScore,
    /// Ensemble that always predicts the true labels (evaluation mode only).
    Oracle,
    /// Ensemble that copies `f`.
    Identity,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::OursRi => "ours_ri",
            Method::OursRm => "ours_rm",
            Method::AvgConf => "avg_conf",
            Method::EnsAvgConf => "ens_avg_conf",
            Method::Msp => "msp",
            Method::TrustScore => "trust_score",
            Method::Oracle => "oracle",
            Method::Identity => "identity",
        }
    }

    /// Methods driving the self-training loop.
    pub fn is_self_training(self) -> bool {
        matches!(self, Method::OursRi | Method::OursRm | Method::Oracle | Method::Identity)
    }

    pub fn trainer_kind(self) -> Option<TrainerKind> {
        match self {
            Method::OursRi => Some(TrainerKind::Ri),
            Method::OursRm => Some(TrainerKind::Rm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// One Gaussian mixture split into source train, source test and target;
    /// only the target is shifted.
    GaussianShift {
        #[serde(default = "d_classes")]
        num_classes: usize,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_train")]
        train_per_class: usize,
        #[serde(default = "d_test")]
        test_per_class: usize,
        #[serde(default = "d_target")]
        target_per_class: usize,
        #[serde(default = "d_sep")]
        separation: f64,
        #[serde(default = "d_shift")]
        shift: ShiftArgs,
        /// When set, the shift magnitude is searched in `[0, shift.magnitude]`
        /// so that the trained `f` reaches this accuracy on the source test
        /// split after the same shift. Target labels are never consulted.
        #[serde(default = "d_calibrate")]
        calibrate_accuracy: Option<f64>,
    },
    TwoMoons {
        #[serde(default = "d_train")]
        train_per_class: usize,
        #[serde(default = "d_test")]
        test_per_class: usize,
        #[serde(default = "d_target")]
        target_per_class: usize,
        #[serde(default = "d_noise")]
        noise_sd: f64,
        #[serde(default = "d_moon_shift")]
        shift: ShiftArgs,
    },
    /// Files with columns `f0..f{d-1}` and, except for an unlabeled target,
    /// a final `label` column. Without `source_test` every fifth training row
    /// is held out for calibration.
    Csv {
        train: PathBuf,
        target: PathBuf,
        #[serde(default)]
        source_test: Option<PathBuf>,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

/// A shift whose seed is derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftArgs {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl ShiftArgs {
    pub fn with_seed(&self, seed: u64) -> ShiftSpec {
        ShiftSpec {
            kind: self.kind,
            magnitude: self.magnitude,
            seed,
        }
    }
}

fn d_classes() -> usize {
    3
}
fn d_dim() -> usize {
    10
}
fn d_train() -> usize {
    200
}
fn d_test() -> usize {
    100
}
fn d_target() -> usize {
    200
}
fn d_sep() -> f64 {
    2.2
}
fn d_calibrate() -> Option<f64> {
    Some(0.7)
}
fn d_noise() -> f64 {
    0.15
}
fn d_shift() -> ShiftArgs {
    ShiftArgs {
        kind: ShiftKind::MeanShift,
        magnitude: 8.0,
    }
}
fn d_moon_shift() -> ShiftArgs {
    ShiftArgs {
        kind: ShiftKind::Rotation,
        magnitude: 0.5,
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::GaussianShift {
            num_classes: d_classes(),
            dim: d_dim(),
            train_per_class: d_train(),
            test_per_class: d_test(),
            target_per_class: d_target(),
            separation: d_sep(),
            shift: d_shift(),
            calibrate_accuracy: d_calibrate(),
        }
    }
}

/// The pre-trained classifier `f`: trained from the architecture below, or
/// loaded from a JSON model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_encoder")]
    pub encoder: Vec<usize>,
    #[serde(default)]
    pub predictor_hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub load: Option<PathBuf>,
}

fn d_encoder() -> Vec<usize> {
    vec![32, 32]
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: d_encoder(),
            predictor_hidden: Vec::new(),
            train: TrainConfig::default(),
            load: None,
        }
    }
}

/// Ensemble settings; architecture and pre-training follow the model spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleArgs {
    #[serde(default = "d_members")]
    pub members: usize,
    #[serde(default = "d_pseudo_weight")]
    pub pseudo_weight: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Learning rate of the one-epoch fine-tuning step; `null` reuses the
    /// model's training rate.
    #[serde(default = "d_ft_lr")]
    pub finetune_learning_rate: Option<f64>,
}

fn d_members() -> usize {
    5
}
fn d_pseudo_weight() -> f64 {
    0.1
}
fn d_alpha() -> f64 {
    1.0
}
fn d_ft_lr() -> Option<f64> {
    Some(0.02)
}

impl Default for EnsembleArgs {
    fn default() -> Self {
        Self {
            members: d_members(),
            pseudo_weight: d_pseudo_weight(),
            alpha: d_alpha(),
            finetune_learning_rate: d_ft_lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopArgs {
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_mode")]
    pub mode: SelectionMode,
}

fn d_iterations() -> usize {
    5
}
fn d_mode() -> SelectionMode {
    SelectionMode::MajorityVote
}

impl Default for LoopArgs {
    fn default() -> Self {
        Self {
            iterations: d_iterations(),
            mode: d_mode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdealizedArgs {
    pub sigma2: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSweepArgs {
    #[serde(default = "d_trials")]
    pub trials: usize,
    #[serde(default = "d_sweep_m")]
    pub m: usize,
    #[serde(default = "d_sweep_classes")]
    pub classes: Vec<usize>,
}

fn d_trials() -> usize {
    1000
}
fn d_sweep_m() -> usize {
    5000
}
fn d_sweep_classes() -> Vec<usize> {
    vec![2, 3, 10]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceArgs {
    pub process: SyntheticEnsembleSpec,
    pub iterations: usize,
    pub eta: f64,
    pub sigma2_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TheoryArgs {
    #[serde(default)]
    pub bounds: Option<BoundInputs>,
    #[serde(default)]
    pub idealized: Option<IdealizedArgs>,
    #[serde(default)]
    pub lemma_sweep: Option<LemmaSweepArgs>,
    #[serde(default)]
    pub convergence: Option<ConvergenceArgs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPair {
    pub name: String,
    pub data: DataSpec,
}

/// Benchmark grid. `members` and `pseudo_weight` sweeps add variants of the
/// self-training methods; the T sweep is read off every self-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchArgs {
    #[serde(default)]
    pub pairs: Vec<NamedPair>,
    #[serde(default = "d_bench_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_bench_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub members: Vec<usize>,
    #[serde(default)]
    pub pseudo_weight: Vec<f64>,
}

fn d_bench_methods() -> Vec<Method> {
    vec![Method::OursRi, Method::AvgConf, Method::Msp]
}
fn d_bench_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            pairs: Vec::new(),
            methods: d_bench_methods(),
            seeds: d_bench_seeds(),
            members: Vec::new(),
            pseudo_weight: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    #[serde(default = "d_gc_trials")]
    pub trials: usize,
    #[serde(default = "d_gc_step")]
    pub step: f64,
    #[serde(default = "d_gc_tol")]
    pub tolerance: f64,
}

fn d_gc_trials() -> usize {
    50
}
fn d_gc_step() -> f64 {
    1e-5
}
fn d_gc_tol() -> f64 {
    1e-4
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            trials: d_gc_trials(),
            step: d_gc_step(),
            tolerance: d_gc_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub evaluation_mode: bool,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "d_method")]
    pub method: Method,
    #[serde(default)]
    pub ensemble: EnsembleArgs,
    #[serde(default, rename = "loop")]
    pub self_training: LoopArgs,
    #[serde(default = "d_trust_k")]
    pub trust_k: usize,
    /// Save ensemble member predictions of the last iteration as CSV.
    #[serde(default)]
    pub export_predictions: bool,
    #[serde(default)]
    pub theory: TheoryArgs,
    #[serde(default)]
    pub bench: BenchArgs,
    #[serde(default)]
    pub gradcheck: GradcheckArgs,
}

fn d_method() -> Method {
    Method::OursRi
}
fn d_trust_k() -> usize {
    10
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults deserialize")
    }
}

/// Sets `path` (dot separated; numeric segments index arrays) to `value`,
/// creating missing objects along the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("invalid override path {path:?}");
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| anyhow!("{path}: segment {part:?} must index an array"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("{path}: index {idx} out of range (length {len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("{path}: {part:?} is inside a scalar"),
        };
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("override {text:?} must look like key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut root, &k, v)?;
    }
    if let Some(s) = seed {
        set_path(&mut root, "seed", Value::from(s))?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("config error at `{path}`: {}", e.into_inner())
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.method, Method::OursRi);
        assert_eq!(cfg.ensemble.members, 5);
    }

    #[test]
    fn overrides_and_paths() {
        let mut v = serde_json::json!({"bench": {"seeds": [1, 2]}});
        set_path(&mut v, "bench.seeds.1", Value::from(7)).unwrap();
        set_path(&mut v, "ensemble.members", Value::from(3)).unwrap();
        assert_eq!(v["bench"]["seeds"][1], 7);
        assert_eq!(v["ensemble"]["members"], 3);
        assert!(set_path(&mut v, "bench.seeds.9", Value::from(1)).is_err());
        assert!(set_path(&mut v, "ensemble.members.x", Value::from(1)).is_err());
        assert_eq!(parse_override("method=msp").unwrap().1, Value::String("msp".into()));
        assert_eq!(parse_override("a.b=[1,2]").unwrap().1, serde_json::json!([1, 2]));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn partial_sections_keep_field_defaults() {
        let cfg = load_config(None, &["ensemble.members=5".into(), "model.train.epochs=30".into()], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = load_config(None, &["ensemble.memebrs=3".into()], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ensemble"), "{msg}");
        assert!(msg.contains("memebrs"), "{msg}");
    }

    #[test]
    fn seed_flag_wins() {
        let cfg = load_config(None, &["seed=4".into()], Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
    }
}
