use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selftrain_cli::commands;
use selftrain_cli::config::load_config;

#[derive(Parser)]
#[command(name = "selftrain", version, about = "Estimate a classifier's accuracy on unlabeled data and flag its errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the accuracy of f on the target inputs.
    Estimate(Common),
    /// Flag the target points f likely mis-classifies.
    Detect(Common),
    /// Measure the ensemble conditions per self-training iteration (needs --eval).
    Conditions(Common),
    /// Evaluate the closed-form bounds and run the simulator checks.
    Theory(Common),
    /// Run the benchmark grid (needs --eval).
    Bench(Common),
    /// Compare backprop gradients with finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `ensemble.members=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation mode: read the target labels and score the run.
    #[arg(long)]
    eval: bool,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (Command::Estimate(c)
    | Command::Detect(c)
    | Command::Conditions(c)
    | Command::Theory(c)
    | Command::Bench(c)
    | Command::Gradcheck(c)) = &cli.command;
    let mut cfg = load_config(c.config.as_deref(), &c.set, c.seed)?;
    cfg.evaluation_mode |= c.eval;
    let out = c.out.as_path();
    Ok(match cli.command {
        Command::Estimate(_) => {
            let r = commands::cmd_estimate(&cfg, out)?;
            println!("estimated accuracy {:.4}", r.estimated_accuracy);
            if let Some(e) = r.evaluation {
                println!("true accuracy {:.4}, estimation error {:.4}", e.true_accuracy, e.estimation_error);
            }
            true
        }
        Command::Detect(_) => {
            let r = commands::cmd_detect(&cfg, out)?;
            println!("flagged {} of {} points", r.flagged_indices.as_ref().map_or(0, Vec::len), r.num_points);
            if let Some(f1) = r.evaluation.and_then(|e| e.f1) {
                println!("F1 {f1:.4}");
            }
            true
        }
        Command::Conditions(_) => {
            let r = commands::cmd_conditions(&cfg, out)?;
            let p = r.report.percent;
            println!(
                "nu~ {:.2}%  gamma~ {:.2}%  sigma2_L {}",
                p.nu_tilde,
                p.gamma_tilde,
                p.sigma2_l.map_or("undefined".into(), |v| format!("{v:.2}%"))
            );
            true
        }
        Command::Theory(_) => {
            let r = commands::cmd_theory(&cfg, out)?;
            let b = &r.bounds;
            for (name, violated) in [
                ("theorem 1", b.theorem1.as_ref().map(|x| &x.violated_preconditions)),
                ("corollary", b.corollary.as_ref().map(|x| &x.violated_preconditions)),
                ("idealized", b.idealized.as_ref().map(|x| &x.violated_preconditions)),
            ] {
                for v in violated.into_iter().flatten() {
                    eprintln!("{name} precondition not met: {v}");
                }
            }
            for c in r.checks.iter().filter(|c| !c.pass) {
                eprintln!("FAILED {}: {} > {}", c.name, c.lhs, c.rhs);
            }
            println!("{} checks, {}", r.checks.len(), if r.passed { "all passed" } else { "violations found" });
            r.passed
        }
        Command::Bench(_) => {
            let r = commands::cmd_bench(&cfg, out)?;
            println!("{} rows written to {}", r.rows.len(), out.join(commands::TABLE).display());
            true
        }
        Command::Gradcheck(_) => {
            let r = commands::cmd_gradcheck(&cfg, out)?;
            println!("max relative error {:.3e} over {} trials", r.max_relative_error, r.trials.len());
            r.passed
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
