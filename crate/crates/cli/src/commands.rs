//! The six subcommands. Each returns `Ok(true)` on success, `Ok(false)` when
//! it ran to completion but a verification failed, and `Err` otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use selftrain::datagen::LabeledDataset;
use selftrain::framework::IterationRecord;
use selftrain::metrics::{ConditionReport, IterationConditions};
use selftrain::numkernel::{grad_check, Architecture, DenseMatrix, GradCheckBatch, MlpModel};
use selftrain::rng::{stream, Stream};
use selftrain::theorylab::{
    corollary_bounds, gen_synthetic_process, idealized_bounds, lemma_sweep, theorem1_bounds, verify_geometric_convergence,
    BoundReport, ConvergenceTrace, IdealizedBounds, SweepSummary,
};

use crate::config::{Method, RunConfig};
use crate::pipeline::{evaluate, prepare, run_method, Evaluation, MethodOutcome};

pub const REPORT: &str = "report.json";
pub const TABLE: &str = "table.csv";
pub const SUMMARY: &str = "summary.md";
pub const PREDICTIONS: &str = "ensemble_predictions.csv";
pub const MODEL: &str = "model.json";

fn write_json(out: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let path = out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Iteration record without the index list.
#[derive(Debug, Clone, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub r_size: usize,
    pub mean_agreement: f64,
    pub majority_disagreements: usize,
    pub r_unchanged: bool,
}

impl From<&IterationRecord> for IterationSummary {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.iteration,
            r_size: r.r_size,
            mean_agreement: r.mean_agreement,
            majority_disagreements: r.majority_disagreements,
            r_unchanged: r.r_unchanged,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub command: &'static str,
    pub seed: u64,
    pub method: Method,
    pub num_points: usize,
    pub num_classes: usize,
    pub estimated_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flagged_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub iterations: Vec<IterationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
    pub config: RunConfig,
}

fn method_report(
    command: &'static str,
    cfg: &RunConfig,
    outcome: &MethodOutcome,
    num_points: usize,
    num_classes: usize,
    evaluation: Option<Evaluation>,
) -> MethodReport {
    let baseline = outcome.baseline.as_ref();
    MethodReport {
        command,
        seed: cfg.seed,
        method: outcome.method,
        num_points,
        num_classes,
        estimated_accuracy: outcome.estimated_accuracy,
        flagged_indices: (command == "detect").then(|| outcome.flagged.clone()),
        threshold: baseline.and_then(|b| b.threshold),
        note: baseline.and_then(|b| b.note.clone()),
        iterations: outcome
            .run
            .as_ref()
            .map(|r| r.iterations.iter().map(IterationSummary::from).collect())
            .unwrap_or_default(),
        evaluation,
        config: cfg.clone(),
    }
}

fn run_single(command: &'static str, cfg: &RunConfig, out: &Path) -> Result<MethodReport> {
    if command == "detect" && matches!(cfg.method, Method::AvgConf | Method::EnsAvgConf) {
        bail!("method {} only estimates accuracy; it cannot detect errors", cfg.method.name());
    }
    let prep = prepare(cfg)?;
    let outcome = run_method(cfg, &prep, cfg.method)?;
    let evaluation = evaluate(&prep, &outcome, cfg.evaluation_mode && outcome.run.is_some())?;
    let report = method_report(command, cfg, &outcome, prep.num_points(), prep.scenario.num_classes, evaluation);
    write_json(out, REPORT, &report).context("stage report")?;
    if cfg.model.load.is_none() {
        write_json(out, MODEL, &prep.f).context("stage report")?;
    }
    if cfg.export_predictions {
        if let Some(p) = &outcome.predictions {
            p.save_csv(&out.join(PREDICTIONS)).context("stage report")?;
        }
    }
    Ok(report)
}

pub fn cmd_estimate(cfg: &RunConfig, out: &Path) -> Result<MethodReport> {
    run_single("estimate", cfg, out)
}

pub fn cmd_detect(cfg: &RunConfig, out: &Path) -> Result<MethodReport> {
    run_single("detect", cfg, out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionsOutput {
    pub command: &'static str,
    pub seed: u64,
    pub method: Method,
    pub report: ConditionReport,
    pub config: RunConfig,
}

fn condition_row(c: &IterationConditions) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        c.iteration.to_string(),
        c.nu.to_string(),
        c.nu_bar.to_string(),
        opt(c.gamma_agree),
        opt(c.sigma2),
        c.sigma2_all.to_string(),
        c.g_size.to_string(),
        c.b_size.to_string(),
        c.r_size.to_string(),
        c.r_in_w.to_string(),
        c.w_size.to_string(),
    ]
}

pub fn cmd_conditions(cfg: &RunConfig, out: &Path) -> Result<ConditionsOutput> {
    if !cfg.evaluation_mode {
        bail!("conditions needs the true target labels; rerun with --eval");
    }
    if !cfg.method.is_self_training() {
        bail!("conditions are defined for self-training methods, not {}", cfg.method.name());
    }
    let prep = prepare(cfg)?;
    let outcome = run_method(cfg, &prep, cfg.method)?;
    let report = evaluate(&prep, &outcome, true)?
        .and_then(|e| e.conditions)
        .context("stage conditions: no report produced")?;
    let mut w = csv_writer(out, TABLE)?;
    w.write_record([
        "iteration", "nu", "nu_bar", "gamma", "sigma2", "sigma2_all", "g_size", "b_size", "r_size", "r_in_w", "w_size",
    ])?;
    for c in &report.iterations {
        w.write_record(condition_row(c))?;
    }
    w.flush()?;
    let output = ConditionsOutput {
        command: "conditions",
        seed: cfg.seed,
        method: cfg.method,
        report,
        config: cfg.clone(),
    };
    write_json(out, REPORT, &output).context("stage report")?;
    Ok(output)
}

fn csv_writer(out: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BoundsOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem1: Option<BoundReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corollary: Option<BoundReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idealized: Option<IdealizedBounds>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryOutput {
    pub command: &'static str,
    pub bounds: BoundsOutput,
    pub checks: Vec<NamedCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceTrace>,
    pub passed: bool,
    pub config: RunConfig,
}

pub fn cmd_theory(cfg: &RunConfig, out: &Path) -> Result<TheoryOutput> {
    let th = &cfg.theory;
    if th.bounds.is_none() && th.lemma_sweep.is_none() && th.convergence.is_none() {
        bail!("theory needs at least one of theory.bounds, theory.lemma_sweep, theory.convergence");
    }
    let mut bounds = BoundsOutput::default();
    if let Some(inputs) = &th.bounds {
        if inputs.eta.is_some() && inputs.delta.is_some() {
            bounds.theorem1 = Some(theorem1_bounds(inputs).context("stage bounds")?);
        }
        bounds.corollary = Some(corollary_bounds(inputs).context("stage bounds")?);
        if let Some(ideal) = &th.idealized {
            bounds.idealized = Some(idealized_bounds(inputs, ideal.sigma2, ideal.r).context("stage bounds")?);
        }
    } else if th.idealized.is_some() {
        bail!("theory.idealized needs theory.bounds");
    }
    let mut checks = Vec::new();
    let sweep = match &th.lemma_sweep {
        Some(s) => {
            let summary = lemma_sweep(s.trials, s.m, &s.classes, cfg.seed).context("stage lemma sweep")?;
            checks.push(NamedCheck {
                name: format!("lemma sweep violations over {} trials", summary.trials),
                lhs: summary.violations as f64,
                rhs: 0.0,
                pass: summary.violations == 0,
            });
            checks.extend(summary.failures.iter().map(|f| NamedCheck {
                name: format!("trial {} (K={}): {}", f.trial, f.num_classes, f.check.name),
                lhs: f.check.lhs,
                rhs: f.check.rhs,
                pass: false,
            }));
            Some(summary)
        }
        None => None,
    };
    let convergence = match &th.convergence {
        Some(c) => {
            let mut process = gen_synthetic_process(&c.process).context("stage convergence")?;
            let trace = verify_geometric_convergence(&mut process, c.iterations, c.eta, c.sigma2_l)
                .context("stage convergence")?;
            for (t, (&n, &b)) in trace.trace.iter().zip(&trace.bound).enumerate() {
                checks.push(NamedCheck {
                    name: format!("|W \\ R| after {t} iterations <= geometric bound"),
                    lhs: n as f64,
                    rhs: b,
                    pass: n as f64 <= b,
                });
            }
            Some(trace)
        }
        None => None,
    };
    let passed = checks.iter().all(|c| c.pass);
    let output = TheoryOutput {
        command: "theory",
        bounds,
        checks,
        sweep,
        trace: convergence.as_ref().map(|c| c.trace.clone()).unwrap_or_default(),
        convergence,
        passed,
        config: cfg.clone(),
    };
    write_json(out, REPORT, &output).context("stage report")?;
    Ok(output)
}

/// One method variant of the benchmark grid.
#[derive(Debug, Clone)]
struct Variant {
    label: String,
    method: Method,
    members: Option<usize>,
    pseudo_weight: Option<f64>,
}

fn variants(cfg: &RunConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for &method in &cfg.bench.methods {
        out.push(Variant {
            label: method.name().into(),
            method,
            members: None,
            pseudo_weight: None,
        });
        if method.trainer_kind().is_none() {
            continue;
        }
        for &n in &cfg.bench.members {
            out.push(Variant {
                label: format!("{}[N={n}]", method.name()),
                method,
                members: Some(n),
                pseudo_weight: None,
            });
        }
        for &w in &cfg.bench.pseudo_weight {
            out.push(Variant {
                label: format!("{}[w={w}]", method.name()),
                method,
                members: None,
                pseudo_weight: Some(w),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub pair: String,
    pub method: String,
    pub seed: u64,
    pub true_accuracy: f64,
    pub estimated_accuracy: f64,
    pub estimation_error: f64,
    pub f1: Option<f64>,
    /// Estimation error after iteration `t = 1..T`; empty for baselines.
    pub error_by_iteration: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutput {
    pub command: &'static str,
    pub rows: Vec<BenchRow>,
    pub config: RunConfig,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn bench_cell(cfg: &RunConfig, pair: &str, seed: u64, variants: &[Variant]) -> Result<Vec<BenchRow>> {
    let prep = prepare(cfg).with_context(|| format!("pair {pair}, seed {seed}"))?;
    variants
        .iter()
        .map(|v| {
            let mut vcfg = cfg.clone();
            if let Some(n) = v.members {
                vcfg.ensemble.members = n;
            }
            if let Some(w) = v.pseudo_weight {
                vcfg.ensemble.pseudo_weight = w;
            }
            let outcome =
                run_method(&vcfg, &prep, v.method).with_context(|| format!("pair {pair}, {}, seed {seed}", v.label))?;
            let e = evaluate(&prep, &outcome, false)?.context("bench needs evaluation mode")?;
            Ok(BenchRow {
                pair: pair.to_string(),
                method: v.label.clone(),
                seed,
                true_accuracy: e.true_accuracy,
                estimated_accuracy: outcome.estimated_accuracy,
                estimation_error: e.estimation_error,
                f1: e.f1,
                error_by_iteration: e.estimation_error_by_iteration,
            })
        })
        .collect()
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<BenchOutput> {
    if !cfg.evaluation_mode {
        bail!("bench scores methods against the true target labels; rerun with --eval");
    }
    let b = &cfg.bench;
    if b.pairs.is_empty() || b.methods.is_empty() || b.seeds.is_empty() {
        bail!("bench needs non-empty bench.pairs, bench.methods and bench.seeds");
    }
    let vars = variants(cfg);
    let cells: Vec<(usize, u64)> = (0..b.pairs.len())
        .flat_map(|p| b.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let mut rows: Vec<BenchRow> = cells
        .par_iter()
        .map(|&(p, seed)| {
            let pair = &b.pairs[p];
            let mut ccfg = cfg.clone();
            ccfg.seed = seed;
            ccfg.data = pair.data.clone();
            bench_cell(&ccfg, &pair.name, seed, &vars)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| (&a.pair, &a.method, a.seed).cmp(&(&b.pair, &b.method, b.seed)));

    let t_max = cfg.self_training.iterations;
    let mut w = csv_writer(out, TABLE)?;
    let mut header: Vec<String> = ["pair", "method", "seed", "true_accuracy", "estimated_accuracy", "estimation_error", "f1"]
        .map(String::from)
        .to_vec();
    header.extend((1..=t_max).map(|t| format!("error_t{t}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![
            r.pair.clone(),
            r.method.clone(),
            r.seed.to_string(),
            r.true_accuracy.to_string(),
            r.estimated_accuracy.to_string(),
            r.estimation_error.to_string(),
            r.f1.map(|v| v.to_string()).unwrap_or_default(),
        ];
        rec.extend((0..t_max).map(|t| r.error_by_iteration.get(t).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(out.join(SUMMARY), summary_markdown(&rows, t_max)).context("writing summary")?;
    let output = BenchOutput {
        command: "bench",
        rows,
        config: cfg.clone(),
    };
    write_json(out, REPORT, &output).context("stage report")?;
    Ok(output)
}

fn summary_markdown(rows: &[BenchRow], t_max: usize) -> String {
    let mut groups: BTreeMap<(&str, &str), Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.pair, &r.method)).or_default().push(r);
    }
    let fmt = |xs: &[f64]| {
        if xs.is_empty() {
            "-".to_string()
        } else {
            let (m, s) = mean_std(xs);
            format!("{m:.4} ± {s:.4}")
        }
    };
    let mut md = String::from("# Benchmark summary\n\nMean ± sample std over seeds.\n\n");
    md.push_str("| pair | method | seeds | acc(f) | estimation error | F1 |\n|---|---|---|---|---|---|\n");
    for ((pair, method), rs) in &groups {
        let col = |g: fn(&BenchRow) -> Option<f64>| rs.iter().filter_map(|r| g(r)).collect::<Vec<_>>();
        md.push_str(&format!(
            "| {pair} | {method} | {} | {} | {} | {} |\n",
            rs.len(),
            fmt(&col(|r| Some(r.true_accuracy))),
            fmt(&col(|r| Some(r.estimation_error))),
            fmt(&col(|r| r.f1)),
        ));
    }
    md.push_str("\n## Estimation error by self-training iteration\n\n| pair | method |");
    for t in 1..=t_max {
        md.push_str(&format!(" T={t} |"));
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---|".repeat(t_max));
    md.push('\n');
    for ((pair, method), rs) in &groups {
        if rs.iter().all(|r| r.error_by_iteration.is_empty()) {
            continue;
        }
        md.push_str(&format!("| {pair} | {method} |"));
        for t in 0..t_max {
            let xs: Vec<f64> = rs.iter().filter_map(|r| r.error_by_iteration.get(t).copied()).collect();
            md.push_str(&format!(" {} |", fmt(&xs)));
        }
        md.push('\n');
    }
    md
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckTrial {
    pub trial: usize,
    pub architecture: Architecture,
    pub mmd: bool,
    pub pseudo: bool,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutput {
    pub command: &'static str,
    pub trials: Vec<GradcheckTrial>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub config: RunConfig,
}

fn gradcheck_trial(seed: u64, trial: usize, step: f64) -> Result<GradcheckTrial> {
    let mut rng = stream(seed, &[0x6772_6164, trial as u64]);
    let d = rng.random_range(2..6);
    let k = rng.random_range(2..5);
    let encoder: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..7)).collect();
    let predictor: Vec<usize> = (0..rng.random_range(0..2)).map(|_| rng.random_range(2..6)).collect();
    let arch = Architecture::new(d, &encoder, &predictor, k);
    let mut model = MlpModel::init(&arch, rng.random())?;
    let jitter: Vec<f64> = model.flat_params().iter().map(|p| p + rng.random_range(-0.2..0.2)).collect();
    model.set_flat_params(&jitter)?;
    let sample = |rng: &mut Stream, n: usize| -> Result<LabeledDataset> {
        let x = DenseMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect())?;
        let y = (0..n).map(|_| rng.random_range(0..k)).collect();
        Ok(LabeledDataset::new(x, y, k)?)
    };
    let n = rng.random_range(3..9);
    let source = sample(&mut rng, n)?;
    let mmd = trial.is_multiple_of(2);
    let pseudo = !trial.is_multiple_of(3);
    let n = rng.random_range(2..6);
    let pseudo_set = if pseudo { Some(sample(&mut rng, n)?) } else { None };
    let n = rng.random_range(3..7);
    let target = sample(&mut rng, n)?.into_features();
    let batch = GradCheckBatch {
        source,
        pseudo: pseudo_set,
        pseudo_weight: rng.random_range(0.05..1.0),
        mmd: mmd.then(|| (target, rng.random_range(0.1..2.0), rng.random_range(0.5..3.0))),
    };
    Ok(GradcheckTrial {
        trial,
        architecture: arch,
        mmd,
        pseudo,
        max_relative_error: grad_check(&model, &batch, step)?,
    })
}

/// Backprop against central differences on random small models; every other
/// trial has the MMD term active.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<GradcheckOutput> {
    let g = &cfg.gradcheck;
    if g.trials == 0 {
        bail!("gradcheck.trials must be positive");
    }
    let trials = (0..g.trials)
        .into_par_iter()
        .map(|t| gradcheck_trial(cfg.seed, t, g.step))
        .collect::<Result<Vec<_>>>()
        .context("stage gradcheck")?;
    let worst = trials.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
    let output = GradcheckOutput {
        command: "gradcheck",
        trials,
        max_relative_error: worst,
        tolerance: g.tolerance,
        passed: worst < g.tolerance,
        config: cfg.clone(),
    };
    write_json(out, REPORT, &output).context("stage report")?;
    Ok(output)
}
