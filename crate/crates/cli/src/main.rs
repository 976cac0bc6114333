//! Command-line front end: run experiments from JSON configs and classify
//! step-size schedules.
//!
//! Exit codes are a contract for CI: 0 when every enabled check passed, 1
//! when a check failed or divergence exceeded its budget, 2 for unusable
//! configs or arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sgd_diag::experiment::{run_experiment, ExperimentConfig, ExperimentError};
use sgd_diag::schedule::{Classification, ScheduleError, StepSizeSchedule, Verdict};

/// Environment variable supplying the default output directory.
const OUT_DIR_ENV: &str = "SGD_DIAG_OUT_DIR";

#[derive(Parser)]
#[command(name = "sgd-diag", version, about = "SGD convergence diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config and write artifacts.
    Run(RunArgs),
    /// Classify a step-size schedule against both summability regimes.
    Classify(ClassifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config.
    config: PathBuf,
    /// Artifact directory; overrides the config's output_dir and the
    /// SGD_DIAG_OUT_DIR environment variable.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the trajectory pool (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Replace the config's base seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Family {
    Power,
    LogPower,
    Constant,
    Table,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Analytic family of the schedule.
    #[arg(long, value_enum)]
    family: Family,
    /// Decay exponent for power and log_power families.
    #[arg(long)]
    q: Option<f64>,
    /// Multiplicative scale for power and log_power families.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Step size for the constant family.
    #[arg(long)]
    value: Option<f64>,
    /// Comma-separated step sizes for the table family.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Moment exponent the relaxed conditions are tested at.
    #[arg(long, default_value_t = 3.0)]
    p: f64,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Classify(args) => classify(args),
    }
}

fn run(args: RunArgs) -> ExitCode {
    if args.threads > 0 {
        if let Err(e) = rayon_pool(args.threads) {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let mut config = match ExperimentConfig::from_path(&args.config) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed_override {
        config.base_seed = seed;
    }
    let out_dir = args
        .out
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));

    let outcome = match run_experiment(&config, &out_dir) {
        Ok(outcome) => outcome,
        Err(e @ ExperimentError::Config(_)) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
        Err(e @ ExperimentError::Artifact { .. }) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    println!(
        "schedule classification: robbins_monro = {}, relaxed = {}{}",
        outcome.classification.robbins_monro,
        outcome.classification.relaxed,
        if outcome.guaranteed {
            ""
        } else {
            " (no convergence guarantee)"
        }
    );
    let stats = &outcome.stats;
    println!(
        "trajectories: {} run, {} diverged ({} seed failures)",
        stats.n_trajectories,
        stats.diverged_count,
        outcome.failures.len()
    );
    for failure in &outcome.failures {
        println!("  seed {}: {}", failure.seed, failure.message);
    }
    if let (Some(grad), Some(t)) = (stats.mean_grad_sq.last(), stats.checkpoints.last()) {
        println!(
            "final checkpoint t = {t}: mean grad_sq = {:.3e} (se {:.1e}), converged fraction = {:.3}",
            grad.mean, grad.stderr, stats.as_converged_fraction
        );
    }
    if let Some(fraction) = outcome.critical_match.fraction {
        println!("critical value match: {fraction:.3}");
    } else {
        println!("critical value match: inconclusive (no certified critical values)");
    }
    for check in &outcome.report.results {
        println!(
            "check {}: {} (value {:.6e}{})",
            check.check_name,
            if check.pass { "pass" } else { "FAIL" },
            check.value,
            match check.tolerance {
                Some(tol) => format!(", tolerance {tol:.6e}"),
                None => String::new(),
            }
        );
    }
    if !outcome.divergence_within_budget {
        println!(
            "divergence: {:.3} of trajectories diverged, over the {:.3} budget",
            outcome.diverged_fraction, config.max_diverged_fraction
        );
    }
    println!("artifacts: {}", outcome.out_dir.display());

    if outcome.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn rayon_pool(threads: usize) -> Result<(), String> {
    sgd_diag::configure_thread_pool(threads)
}

fn classify(args: ClassifyArgs) -> ExitCode {
    let schedule = match build_schedule(&args) {
        Ok(schedule) => schedule,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(2);
        }
    };
    let class = schedule.classify();
    println!("{}", describe_schedule(&args, args.p));
    println!("RM: {}, relaxed: {}", class.robbins_monro, class.relaxed);
    for line in governing_tests(&args, args.p, class) {
        println!("  {line}");
    }
    ExitCode::SUCCESS
}

fn build_schedule(args: &ClassifyArgs) -> Result<StepSizeSchedule, String> {
    let need_q = || args.q.ok_or("this family needs --q".to_string());
    let result = match args.family {
        Family::Power => StepSizeSchedule::power_law(need_q()?, args.scale, args.p),
        Family::LogPower => StepSizeSchedule::log_power_law(need_q()?, args.scale, args.p),
        Family::Constant => {
            let value = args.value.ok_or("constant family needs --value")?;
            StepSizeSchedule::constant(value, args.p)
        }
        Family::Table => {
            if args.values.is_empty() {
                return Err("table family needs --values v1,v2,...".into());
            }
            StepSizeSchedule::table(args.values.clone(), args.p)
        }
    };
    result.map_err(|e: ScheduleError| e.to_string())
}

fn describe_schedule(args: &ClassifyArgs, p: f64) -> String {
    match args.family {
        Family::Power => format!(
            "schedule: {} / t^{} with p = {p}",
            args.scale,
            args.q.unwrap_or(f64::NAN)
        ),
        Family::LogPower => format!(
            "schedule: {} * ln(t) / t^{} with p = {p}",
            args.scale,
            args.q.unwrap_or(f64::NAN)
        ),
        Family::Constant => format!(
            "schedule: constant {} with p = {p}",
            args.value.unwrap_or(f64::NAN)
        ),
        Family::Table => format!(
            "schedule: table of {} entries with p = {p}",
            args.values.len()
        ),
    }
}

/// Which summability tests decided each verdict.
fn governing_tests(args: &ClassifyArgs, p: f64, class: Classification) -> Vec<String> {
    match args.family {
        Family::Power | Family::LogPower => {
            let q = args.q.unwrap_or(f64::NAN);
            vec![
                format!(
                    "sum eps      {} (divergence needs q <= 1; q = {q})",
                    diverges(q <= 1.0)
                ),
                format!(
                    "sum eps^2    {} (Robbins-Monro needs 2q > 1, so q in (1/2, 1])",
                    converges(2.0 * q > 1.0)
                ),
                format!(
                    "sum eps^p    {} (relaxed needs p*q > 1, so q in (1/{p}, 1])",
                    converges(p * q > 1.0)
                ),
            ]
        }
        Family::Constant => vec![
            "sum eps      diverges (constant steps)".into(),
            "sum eps^k    diverges for every power k, so neither regime holds".into(),
        ],
        Family::Table => {
            debug_assert_eq!(class.robbins_monro, Verdict::Unknown);
            vec![
                "finite tables decide no summability test; every infinite tail is possible".into(),
                "classification needs an analytic family (power, log_power, constant)".into(),
            ]
        }
    }
}

fn diverges(yes: bool) -> &'static str {
    if yes {
        "diverges "
    } else {
        "converges"
    }
}

fn converges(yes: bool) -> &'static str {
    if yes {
        "converges"
    } else {
        "diverges "
    }
}
