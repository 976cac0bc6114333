//! Config-driven experiments: parse, validate, run, write artifacts.
//!
//! A config fully determines a run: problem, oracle, schedule, starts, seeds,
//! and which diagnostics to evaluate. Artifacts are pure functions of the
//! config, so re-running into a fresh directory reproduces every byte. The
//! manifest records a hash over the semantic fields (everything except the
//! output directory) to make silent config drift visible in CI.
//!
//! Configs are JSON with unknown fields rejected everywhere: a typo in a
//! tolerance name must be a hard error, not a silently ignored knob.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{
    compute_c_nu, loss_bound_check, mean_and_stderr, BandRecursionOutcome, CheckResult,
    DiagnosticsReport, DESCENT_TOLERANCE, LOSS_BOUND_TOLERANCE,
};
use crate::engine::{RecordPolicy, Trajectory};
use crate::ensemble::{
    band_recursion_check, critical_value_match, median_of_sorted, run_ensemble, BandParams,
    CriticalValueMatch, EnsembleOptions, EnsembleStats, IndicatorParams, SeedFailure, StartPolicy,
    TrajectorySummary, WindowParams,
};
use crate::oracle::GradientOracle;
use crate::problem::Problem;
use crate::sampling::sample_ball;
use crate::schedule::{Classification, StepSizeSchedule, Verdict};

/// A config that cannot run, with a message naming the offending field.
#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Rejected before or while running; maps to exit code 2.
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    /// Artifact writing failed; environment trouble, also exit code 2.
    #[error("cannot write {path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

/// Which built-in objective to run, by registry id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub id: String,
    pub dimension: usize,
}

/// Clipping level for the truncated increment sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementParams {
    pub nu: f64,
}

/// Sampling plan for the pointwise gradient-versus-gap bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBoundParams {
    /// Number of uniform ball samples.
    pub points: usize,
    /// Sampling ball radius.
    pub radius: f64,
    /// Seed of the sampling stream, independent of trajectory seeds.
    #[serde(default)]
    pub seed: u64,
}

/// One diagnostic to evaluate, `{"check": "...", "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", content = "params", rename_all = "snake_case")]
pub enum DiagnosticConfig {
    /// Per-step descent residuals on every trajectory.
    DescentResiduals,
    /// Ensemble-mean clipped increment sum against its analytic bound.
    TruncatedIncrement(IncrementParams),
    /// Excursion variation recursion between two loss bands.
    BandRecursion(BandParams),
    /// Gated descent residuals, nonpositive in ensemble mean.
    IndicatorDescent(IndicatorParams),
    /// Pointwise `grad^2 <= 2L (f - f_star)` audit at random points.
    LossBound(LossBoundParams),
    /// Windowed noise-sum suprema, trending to zero across the given times.
    NoiseWindowSup(WindowParams),
}

fn default_as_tolerance() -> f64 {
    0.1
}

fn default_critical_tolerance() -> f64 {
    1e-2
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub oracle: GradientOracle,
    pub schedule: StepSizeSchedule,
    #[serde(default)]
    pub start: StartPolicy,
    pub steps: u64,
    pub trajectories: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub record_policy: RecordPolicy,
    /// Write one CSV of scalar records per trajectory.
    #[serde(default)]
    pub write_trajectories: bool,
    /// Refuse to run unless the schedule certifies the relaxed conditions.
    #[serde(default)]
    pub require_relaxed: bool,
    /// Gradient-norm tolerance of the tail-sup convergence proxy.
    #[serde(default = "default_as_tolerance")]
    pub as_tolerance: f64,
    /// Tolerance for matching final losses to certified critical values.
    #[serde(default = "default_critical_tolerance")]
    pub critical_tolerance: f64,
    #[serde(default)]
    pub upcross_intervals: Vec<(f64, f64)>,
    #[serde(default)]
    pub diagnostics: Vec<DiagnosticConfig>,
    /// Largest tolerated fraction of diverged trajectories.
    #[serde(default)]
    pub max_diverged_fraction: f64,
    /// Default artifact directory; callers may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn build_problem(&self) -> Result<Problem, ConfigError> {
        Problem::from_id(&self.problem.id, self.problem.dimension)
            .map_err(|e| ConfigError(format!("problem: {e}")))
    }

    /// Field-level consistency beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(ConfigError("steps: must be at least 1".into()));
        }
        if self.trajectories < 2 {
            return Err(ConfigError(format!(
                "trajectories: an ensemble needs at least 2, got {}",
                self.trajectories
            )));
        }
        if let Some(horizon) = self.schedule.horizon() {
            if horizon < self.steps {
                return Err(ConfigError(format!(
                    "schedule: table serves only {horizon} steps but steps = {}",
                    self.steps
                )));
            }
        }
        let schedule_p = self.schedule.p_exponent();
        let oracle_p = self.oracle.declared().p;
        if schedule_p != oracle_p {
            return Err(ConfigError(format!(
                "schedule.p ({schedule_p}) and oracle.p ({oracle_p}) must agree"
            )));
        }
        let problem = self.build_problem()?;
        self.oracle
            .validate_growth(problem.dimension())
            .map_err(|e| ConfigError(format!("oracle: {e}")))?;
        let class = self.schedule.classify();
        if self.require_relaxed && class.relaxed != Verdict::Yes {
            return Err(ConfigError(format!(
                "require_relaxed: schedule fails the gate (classification: robbins_monro = {}, relaxed = {})",
                class.robbins_monro, class.relaxed
            )));
        }
        if !(self.as_tolerance > 0.0) {
            return Err(ConfigError(format!(
                "as_tolerance: must be positive, got {}",
                self.as_tolerance
            )));
        }
        if !(self.critical_tolerance > 0.0) {
            return Err(ConfigError(format!(
                "critical_tolerance: must be positive, got {}",
                self.critical_tolerance
            )));
        }
        if !(0.0..=1.0).contains(&self.max_diverged_fraction) {
            return Err(ConfigError(format!(
                "max_diverged_fraction: must lie in [0, 1], got {}",
                self.max_diverged_fraction
            )));
        }
        for &(left, right) in &self.upcross_intervals {
            if !(left < right) {
                return Err(ConfigError(format!(
                    "upcross_intervals: need left < right, got ({left}, {right})"
                )));
            }
        }
        let needs_relaxed = |name: &str| -> Result<(), ConfigError> {
            if class.relaxed != Verdict::Yes {
                return Err(ConfigError(format!(
                    "{name}: the analytic bound needs a relaxed schedule (classification: relaxed = {})",
                    class.relaxed
                )));
            }
            Ok(())
        };
        let mut seen = (false, false, false);
        for diag in &self.diagnostics {
            match diag {
                DiagnosticConfig::DescentResiduals => {}
                DiagnosticConfig::TruncatedIncrement(params) => {
                    if params.nu <= 0.0 {
                        return Err(ConfigError(format!(
                            "truncated_increment: nu must be positive, got {}",
                            params.nu
                        )));
                    }
                    needs_relaxed("truncated_increment")?;
                }
                DiagnosticConfig::BandRecursion(band) => {
                    if seen.0 {
                        return Err(ConfigError(
                            "diagnostics: at most one band_recursion entry".into(),
                        ));
                    }
                    seen.0 = true;
                    if !(0.0 < band.a && band.a < band.b && band.b < band.c) || band.m == 0 {
                        return Err(ConfigError(format!(
                            "band_recursion: need 0 < a < b < c and m >= 1, got a = {}, b = {}, c = {}, m = {}",
                            band.a, band.b, band.c, band.m
                        )));
                    }
                    needs_relaxed("band_recursion")?;
                }
                DiagnosticConfig::IndicatorDescent(params) => {
                    if seen.1 {
                        return Err(ConfigError(
                            "diagnostics: at most one indicator_descent entry".into(),
                        ));
                    }
                    seen.1 = true;
                    if params.y <= 0.0 || params.m == 0 {
                        return Err(ConfigError(format!(
                            "indicator_descent: need y > 0 and m >= 1, got y = {}, m = {}",
                            params.y, params.m
                        )));
                    }
                }
                DiagnosticConfig::LossBound(params) => {
                    if params.points == 0 {
                        return Err(ConfigError("loss_bound: points must be at least 1".into()));
                    }
                    if !(params.radius.is_finite() && params.radius > 0.0) {
                        return Err(ConfigError(format!(
                            "loss_bound: radius must be positive and finite, got {}",
                            params.radius
                        )));
                    }
                }
                DiagnosticConfig::NoiseWindowSup(window) => {
                    if seen.2 {
                        return Err(ConfigError(
                            "diagnostics: at most one noise_window_sup entry".into(),
                        ));
                    }
                    seen.2 = true;
                    if !self.record_policy.keep_noise_vectors {
                        return Err(ConfigError(
                            "noise_window_sup: requires record_policy.keep_noise_vectors".into(),
                        ));
                    }
                    if window.delta <= 0.0 {
                        return Err(ConfigError(format!(
                            "noise_window_sup: delta must be positive, got {}",
                            window.delta
                        )));
                    }
                    if !(window.window.is_finite() && window.window >= 0.0) {
                        return Err(ConfigError(format!(
                            "noise_window_sup: window must be nonnegative and finite, got {}",
                            window.window
                        )));
                    }
                    if window.times.is_empty() {
                        return Err(ConfigError(
                            "noise_window_sup: times must be nonempty".into(),
                        ));
                    }
                    for &t in &window.times {
                        if t == 0 || t > self.steps {
                            return Err(ConfigError(format!(
                                "noise_window_sup: time {t} lies outside 1..={}",
                                self.steps
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Hash of the semantically meaningful fields. The output directory is
    /// excluded: it relocates artifacts without changing their content.
    pub fn config_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = None;
        let canonical = serde_json::to_string(&semantic).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn ensemble_options(&self) -> EnsembleOptions {
        let mut options = EnsembleOptions {
            record_policy: self.record_policy,
            as_tolerance: self.as_tolerance,
            upcross_intervals: self.upcross_intervals.clone(),
            ..EnsembleOptions::default()
        };
        for diag in &self.diagnostics {
            match diag {
                DiagnosticConfig::DescentResiduals => options.descent = true,
                DiagnosticConfig::TruncatedIncrement(params) => {
                    options.increment_levels.push(params.nu)
                }
                DiagnosticConfig::BandRecursion(band) => options.band = Some(*band),
                DiagnosticConfig::IndicatorDescent(params) => options.indicator = Some(*params),
                DiagnosticConfig::LossBound(_) => {}
                DiagnosticConfig::NoiseWindowSup(window) => options.window = Some(window.clone()),
            }
        }
        options
    }
}

/// A finished experiment plus the aggregates the exit-code contract needs.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub stats: EnsembleStats,
    pub report: DiagnosticsReport,
    pub critical_match: CriticalValueMatch,
    pub classification: Classification,
    /// Whether the schedule certifies the relaxed conditions.
    pub guaranteed: bool,
    pub failures: Vec<SeedFailure>,
    pub diverged_fraction: f64,
    pub divergence_within_budget: bool,
    pub out_dir: PathBuf,
}

impl ExperimentOutcome {
    /// Exit-0 condition: every check passed, divergence stayed within budget,
    /// every seed actually ran.
    pub fn success(&self) -> bool {
        self.report.all_pass() && self.divergence_within_budget && self.failures.is_empty()
    }
}

/// JSON shape of `ensemble.json`.
#[derive(Serialize)]
struct EnsembleArtifact<'a> {
    stats: &'a EnsembleStats,
    classification: Classification,
    guaranteed: bool,
    guarantee_note: String,
    critical_value_match: &'a CriticalValueMatch,
    failures: &'a [SeedFailure],
}

/// Runs the experiment and writes `ensemble.json`, `checkpoints.csv`,
/// `diagnostics.json`, `manifest.json`, and optional per-trajectory CSVs
/// into `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let problem = config.build_problem()?;
    let options = config.ensemble_options();
    fs::create_dir_all(out_dir).map_err(|e| ExperimentError::Artifact {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;

    // Trajectory CSVs stream out of the worker pool; each seed owns its file,
    // so writes never contend. The first failure is kept and surfaced.
    let sink_error: Mutex<Option<(PathBuf, String)>> = Mutex::new(None);
    let write_sink = |traj: &Trajectory| {
        let path = out_dir.join(format!("trajectory_{}.csv", traj.seed));
        let result = File::create(&path).and_then(|f| {
            let mut w = BufWriter::new(f);
            traj.write_csv(&mut w)?;
            w.flush()
        });
        if let Err(e) = result {
            sink_error
                .lock()
                .unwrap()
                .get_or_insert((path, e.to_string()));
        }
    };
    let sink: Option<&(dyn Fn(&Trajectory) + Sync)> = if config.write_trajectories {
        Some(&write_sink)
    } else {
        None
    };

    let ensemble = run_ensemble(
        &problem,
        &config.oracle,
        &config.schedule,
        &config.start,
        config.steps,
        config.trajectories,
        config.base_seed,
        &options,
        sink,
    )
    .map_err(|e| ConfigError(e.to_string()))?;
    if let Some((path, message)) = sink_error.into_inner().unwrap() {
        return Err(ExperimentError::Artifact { path, message });
    }

    let report = build_report(config, &problem, &ensemble.summaries)?;
    let critical_match =
        critical_value_match(&ensemble.summaries, &problem, config.critical_tolerance);
    let classification = config.schedule.classify();
    let guaranteed = classification.relaxed == Verdict::Yes;
    let diverged_fraction = ensemble.stats.diverged_count as f64 / config.trajectories as f64;

    let guarantee_note = if guaranteed {
        format!(
            "schedule certifies the relaxed summability conditions at p = {}; convergence guarantees apply",
            config.schedule.p_exponent()
        )
    } else {
        format!(
            "no guarantee: classification is robbins_monro = {}, relaxed = {}; results recorded as observed",
            classification.robbins_monro, classification.relaxed
        )
    };
    let artifact = EnsembleArtifact {
        stats: &ensemble.stats,
        classification,
        guaranteed,
        guarantee_note,
        critical_value_match: &critical_match,
        failures: &ensemble.failures,
    };
    write_json(&out_dir.join("ensemble.json"), &artifact)?;
    write_text(
        &out_dir.join("checkpoints.csv"),
        &checkpoints_csv(&ensemble.stats),
    )?;
    write_json(&out_dir.join("diagnostics.json"), &report)?;
    write_json(
        &out_dir.join("manifest.json"),
        &serde_json::json!({
            "config_hash": config.config_hash(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;

    Ok(ExperimentOutcome {
        divergence_within_budget: diverged_fraction <= config.max_diverged_fraction,
        stats: ensemble.stats,
        report,
        critical_match,
        classification,
        guaranteed,
        failures: ensemble.failures,
        diverged_fraction,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Per-checkpoint table in the plot-ready CSV shape.
fn checkpoints_csv(stats: &EnsembleStats) -> String {
    let mut csv = String::from("t,mean_grad_sq,stderr,median_f_gap,as_fraction\n");
    for (i, &t) in stats.checkpoints.iter().enumerate() {
        let grad = &stats.mean_grad_sq[i];
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            t, grad.mean, grad.stderr, stats.median_f_gap[i], stats.as_fraction[i]
        ));
    }
    csv
}

fn write_text(path: &Path, content: &str) -> Result<(), ExperimentError> {
    fs::write(path, content).map_err(|e| ExperimentError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Evaluates each configured diagnostic into one report line.
fn build_report(
    config: &ExperimentConfig,
    problem: &Problem,
    summaries: &[TrajectorySummary],
) -> Result<DiagnosticsReport, ExperimentError> {
    let mut report = DiagnosticsReport::default();
    let alive: Vec<&TrajectorySummary> = summaries
        .iter()
        .filter(|s| s.diverged_at.is_none())
        .collect();
    let declared = config.oracle.declared();
    let certificate = problem.certificate();
    let mut increment_index = 0usize;
    for diag in &config.diagnostics {
        let result = match diag {
            DiagnosticConfig::DescentResiduals => {
                let mut max_normalized = f64::NEG_INFINITY;
                let mut violations = 0u64;
                for s in &alive {
                    let check = s.descent.as_ref().expect("descent was enabled");
                    max_normalized = max_normalized.max(check.max_normalized);
                    violations += check.violations;
                }
                CheckResult {
                    check_name: "descent_residuals".into(),
                    params: serde_json::json!({ "trajectories": alive.len() }),
                    value: max_normalized,
                    tolerance: Some(DESCENT_TOLERANCE),
                    pass: violations == 0 && !alive.is_empty(),
                    stderr_halfwidth: None,
                }
            }
            DiagnosticConfig::TruncatedIncrement(params) => {
                let idx = increment_index;
                increment_index += 1;
                let sums: Vec<f64> = alive.iter().map(|s| s.increment_sums[idx]).collect();
                let (mean, stderr) = mean_and_stderr(&sums);
                let bound = compute_c_nu(
                    params.nu,
                    certificate.d_eta,
                    certificate.lipschitz,
                    declared.p,
                    declared.m0,
                    &config.schedule,
                )
                .map_err(|e| ConfigError(format!("truncated_increment: {e}")))?;
                CheckResult {
                    check_name: "truncated_increment".into(),
                    params: serde_json::json!({ "nu": params.nu }),
                    value: mean,
                    tolerance: Some(bound),
                    pass: !alive.is_empty() && mean <= bound + 2.0 * stderr,
                    stderr_halfwidth: Some(stderr),
                }
            }
            DiagnosticConfig::BandRecursion(band) => {
                let check = band_recursion_check(
                    summaries,
                    band,
                    problem,
                    declared.growth,
                    declared.p,
                    declared.m0,
                    &config.schedule,
                    1.0,
                )
                .map_err(|e| ConfigError(format!("band_recursion: {e}")))?;
                let outcome = match &check.outcome {
                    BandRecursionOutcome::Passed => "passed".to_string(),
                    BandRecursionOutcome::Failed => "failed".to_string(),
                    BandRecursionOutcome::Inconclusive(reason) => {
                        format!("inconclusive: {reason}")
                    }
                };
                let halfwidth = check.lhs_halfwidth + check.rhs_halfwidth;
                CheckResult {
                    check_name: "band_recursion".into(),
                    params: serde_json::json!({
                        "a": band.a, "b": band.b, "c": band.c, "m": band.m,
                        "c1": check.c1, "c2": check.c2,
                        "rhs": check.rhs, "delta_hat": check.delta_hat,
                        "outcome": outcome,
                    }),
                    value: check.lhs,
                    tolerance: Some(check.rhs + 2.0 * halfwidth),
                    pass: check.outcome != BandRecursionOutcome::Failed,
                    stderr_halfwidth: Some(halfwidth),
                }
            }
            DiagnosticConfig::IndicatorDescent(params) => {
                let means: Vec<f64> = alive
                    .iter()
                    .map(|s| {
                        s.indicator
                            .as_ref()
                            .expect("indicator enabled")
                            .mean_residual
                    })
                    .collect();
                let (mean, stderr) = mean_and_stderr(&means);
                CheckResult {
                    check_name: "indicator_descent".into(),
                    params: serde_json::json!({ "y": params.y, "m": params.m }),
                    value: mean,
                    tolerance: Some(0.0),
                    pass: !alive.is_empty() && mean <= 2.0 * stderr,
                    stderr_halfwidth: Some(stderr),
                }
            }
            DiagnosticConfig::LossBound(params) => {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                let points: Vec<Vec<f64>> = (0..params.points)
                    .map(|_| sample_ball(problem.dimension(), params.radius, &mut rng))
                    .collect();
                let check = loss_bound_check(problem, &points)
                    .map_err(|e| ConfigError(format!("loss_bound: {e}")))?;
                CheckResult {
                    check_name: "loss_bound".into(),
                    params: serde_json::json!({
                        "points": params.points, "radius": params.radius, "seed": params.seed,
                    }),
                    value: check.max_relative,
                    tolerance: Some(LOSS_BOUND_TOLERANCE),
                    pass: check.pass,
                    stderr_halfwidth: None,
                }
            }
            DiagnosticConfig::NoiseWindowSup(window) => {
                let medians: Vec<f64> = (0..window.times.len())
                    .map(|i| {
                        let mut values: Vec<f64> = alive
                            .iter()
                            .map(|s| s.window_sups.as_ref().expect("window enabled")[i])
                            .collect();
                        values.sort_unstable_by(f64::total_cmp);
                        median_of_sorted(&values)
                    })
                    .collect();
                let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
                CheckResult {
                    check_name: "noise_window_sup".into(),
                    params: serde_json::json!({
                        "window": window.window, "delta": window.delta,
                        "times": window.times, "medians": medians,
                    }),
                    value: medians.last().copied().unwrap_or(f64::NAN),
                    tolerance: None,
                    pass: !alive.is_empty() && decreasing,
                    stderr_halfwidth: None,
                }
            }
        };
        report.push(result);
    }
    Ok(report)
}
