//! Seeded ensembles: many trajectories, cross-seed statistics, and the
//! expectation-level checks that single runs cannot decide.
//!
//! Trajectories run in a work pool, one seed each, and are reduced to compact
//! per-seed summaries inside the pool so a 64 x 200k-step ensemble never
//! holds more than a thread's worth of full records at a time. Aggregation is
//! a pure fold over the seed-ordered summaries, so the statistics are
//! bit-identical no matter how many threads ran or in what order they
//! finished.
//!
//! Divergence is data, not an error: diverged trajectories are counted and
//! reported but excluded from every aggregate. Real errors (a start point of
//! the wrong dimension slipping past validation, a table schedule running
//! dry) surface as per-seed failure entries rather than aborting the pool.
//!
//! Also here: the two-point step-noise law with unit second moment whose
//! sample paths nevertheless keep jumping, used to demonstrate that second
//! moments alone decide nothing about trajectory convergence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{
    band_recursion_from_samples, build_ladder, count_upcrossings, descent_residuals,
    grad_quadratic_variation, indicator_descent_check, martingale_window_sup, mean_and_stderr,
    s_delta_flags, truncated_increment_sum, BandRecursionCheck, BandSamples, DescentCheck,
    DiagnosticsError, IndicatorDescentCheck, Interval,
};
use crate::engine::{run, RecordPolicy, Trajectory};
use crate::oracle::GradientOracle;
use crate::problem::Problem;
use crate::sampling::sample_ball;
use crate::schedule::StepSizeSchedule;

/// Start points use a stream keyed off the trajectory seed but salted, so
/// they never consume draws from the noise stream the engine replays.
const START_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("an ensemble needs at least two trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("start point has {got} entries but the problem is {expected}-dimensional")]
    StartDimension { expected: usize, got: usize },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("up-crossing interval needs left < right, got ({left}, {right})")]
    BadIntervalPair { left: f64, right: f64 },
    #[error("band thresholds must satisfy 0 < a < b < c")]
    BadBand,
    #[error("windowed noise diagnostics need record_policy.keep_noise_vectors")]
    NeedsNoiseVectors,
    #[error("window time {t} lies outside 1..={t_max}")]
    BadWindowTime { t: u64, t_max: u64 },
    #[error("unknown start policy '{0}'")]
    UnknownStartPolicy(String),
    #[error("start policy is missing its '{0}' field")]
    MissingStartField(&'static str),
    #[error("the two-point law needs an atom of at least 1")]
    DegenerateAtom,
    #[error("tail threshold {threshold} must lie below the horizon {horizon}")]
    ThresholdBeyondHorizon { threshold: u64, horizon: u64 },
    #[error("empirical estimates need at least one sample path")]
    NoPaths,
}

/// Where each trajectory starts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StartRepr", into = "StartRepr")]
pub enum StartPolicy {
    #[default]
    Origin,
    Fixed(Vec<f64>),
    /// Uniform draw from the centered ball of this radius, independent per
    /// seed.
    RandomBall {
        radius: f64,
    },
}

impl StartPolicy {
    /// The start point a trajectory with this seed receives. The draw uses a
    /// salted stream so it never collides with the oracle's noise stream.
    pub fn sample(&self, dimension: usize, seed: u64) -> Vec<f64> {
        match self {
            StartPolicy::Origin => vec![0.0; dimension],
            StartPolicy::Fixed(point) => point.clone(),
            StartPolicy::RandomBall { radius } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ START_STREAM_SALT);
                sample_ball(dimension, *radius, &mut rng)
            }
        }
    }
}

/// Flat JSON shape: `{"policy":"origin"}`, `{"policy":"fixed","point":[..]}`,
/// or `{"policy":"random_ball","radius":2.0}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRepr {
    policy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    point: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
}

impl TryFrom<StartRepr> for StartPolicy {
    type Error = EnsembleError;

    fn try_from(repr: StartRepr) -> Result<Self, EnsembleError> {
        match repr.policy.as_str() {
            "origin" => Ok(StartPolicy::Origin),
            "fixed" => {
                let point = repr
                    .point
                    .ok_or(EnsembleError::MissingStartField("point"))?;
                Ok(StartPolicy::Fixed(point))
            }
            "random_ball" => {
                let radius = repr
                    .radius
                    .ok_or(EnsembleError::MissingStartField("radius"))?;
                if !(radius.is_finite() && radius > 0.0) {
                    return Err(EnsembleError::NonPositive {
                        name: "start radius",
                        value: radius,
                    });
                }
                Ok(StartPolicy::RandomBall { radius })
            }
            other => Err(EnsembleError::UnknownStartPolicy(other.to_string())),
        }
    }
}

impl From<StartPolicy> for StartRepr {
    fn from(policy: StartPolicy) -> Self {
        let (name, point, radius) = match policy {
            StartPolicy::Origin => ("origin", None, None),
            StartPolicy::Fixed(point) => ("fixed", Some(point), None),
            StartPolicy::RandomBall { radius } => ("random_ball", None, Some(radius)),
        };
        StartRepr {
            policy: name.into(),
            point,
            radius,
        }
    }
}

/// Loss-band thresholds and variation order for the recursion check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub m: u32,
}

/// Gate and step-size order for the indicator descent residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorParams {
    pub y: f64,
    pub m: u32,
}

/// Windowed noise-supremum evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowParams {
    /// Schedule-time width of each window.
    pub window: f64,
    /// Critical-band half-width for the membership flags.
    pub delta: f64,
    /// Start steps at which the supremum is evaluated.
    pub times: Vec<u64>,
}

/// Everything the pool computes per trajectory beyond the core statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOptions {
    pub record_policy: RecordPolicy,
    /// Gradient-norm tolerance for the tail-sup convergence proxy.
    pub as_tolerance: f64,
    /// Intervals whose up-crossings are counted on the half and full record.
    pub upcross_intervals: Vec<(f64, f64)>,
    pub band: Option<BandParams>,
    /// Truncation levels for the clipped-increment sums.
    pub increment_levels: Vec<f64>,
    pub descent: bool,
    pub indicator: Option<IndicatorParams>,
    pub window: Option<WindowParams>,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            record_policy: RecordPolicy::default(),
            as_tolerance: 0.1,
            upcross_intervals: Vec::new(),
            band: None,
            increment_levels: Vec::new(),
            descent: false,
            indicator: None,
            window: None,
        }
    }
}

/// Per-seed reduction of one trajectory.
///
/// Diverged trajectories keep only their identity fields; every vector is
/// empty and every scalar statistic is NaN, and aggregation skips them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub seed: u64,
    pub diverged_at: Option<u64>,
    pub steps_recorded: u64,
    /// Objective at the last recorded step.
    pub last_f: f64,
    pub last_grad_norm: f64,
    /// Objective at the post-update point.
    pub final_f: f64,
    pub checkpoint_grad_sq: Vec<f64>,
    pub checkpoint_f_gap: Vec<f64>,
    pub checkpoint_mart_inc: Vec<f64>,
    /// Whether `sup grad_norm` over `[t/2, t]` beat the tolerance, per
    /// checkpoint.
    pub checkpoint_tail_ok: Vec<bool>,
    /// `sup grad_norm` over the second half of the record.
    pub tail_sup_grad: f64,
    /// `sup grad_norm^2` over the whole record.
    pub sup_grad_sq: f64,
    pub upcross_half: Vec<u64>,
    pub upcross_full: Vec<u64>,
    pub band_upper: Option<f64>,
    pub band_lower: Option<f64>,
    /// Minimum recorded gradient norm on the band's `[a, c)` shell.
    pub band_min_grad: Option<f64>,
    pub band_any_excursion: bool,
    pub increment_sums: Vec<f64>,
    pub descent: Option<DescentCheck>,
    pub indicator: Option<IndicatorDescentCheck>,
    pub window_sups: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanWithError {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpcrossSaturation {
    pub left: f64,
    pub right: f64,
    pub mean_half: f64,
    pub mean_full: f64,
    /// Fraction of trajectories whose count did not grow after the midpoint.
    pub saturated_fraction: f64,
}

/// Cross-seed aggregates at geometric checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_trajectories: usize,
    pub checkpoints: Vec<u64>,
    pub mean_grad_sq: Vec<MeanWithError>,
    pub mean_mart_inc: Vec<MeanWithError>,
    pub median_f_gap: Vec<f64>,
    /// Per-checkpoint fraction of trajectories passing the tail-sup proxy.
    pub as_fraction: Vec<f64>,
    /// Final-checkpoint value of `as_fraction`.
    pub as_converged_fraction: f64,
    pub as_tolerance: f64,
    /// What the proxy means; almost-sure limits are not observable on finite
    /// records.
    pub as_criterion: String,
    pub upcross_saturation: Vec<UpcrossSaturation>,
    pub sup_grad_sq_mean: f64,
    pub diverged_count: usize,
}

/// A trajectory that could not run at all (as opposed to diverging).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

/// Aggregates plus the summaries they were folded from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub stats: EnsembleStats,
    pub summaries: Vec<TrajectorySummary>,
    pub failures: Vec<SeedFailure>,
}

/// Geometric checkpoint grid: the distinct values of `ceil(t_steps / 2^j)`,
/// ascending, always ending at `t_steps` and starting at 1.
pub fn geometric_checkpoints(t_steps: u64) -> Vec<u64> {
    assert!(t_steps >= 1);
    let mut points = Vec::new();
    let mut divisor = 1u64;
    loop {
        let value = t_steps.div_ceil(divisor);
        points.push(value);
        if value == 1 {
            break;
        }
        divisor *= 2;
    }
    points.reverse();
    points.dedup();
    points
}

/// Runs `n` trajectories with seeds `base_seed..base_seed + n` and folds them
/// into [`EnsembleStats`].
///
/// `sink` sees each finished trajectory inside the pool (before its records
/// are dropped); use it to stream per-trajectory artifacts to disk.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    starts: &StartPolicy,
    t_steps: u64,
    n: usize,
    base_seed: u64,
    options: &EnsembleOptions,
    sink: Option<&(dyn Fn(&Trajectory) + Sync)>,
) -> Result<EnsembleOutcome, EnsembleError> {
    if n < 2 {
        return Err(EnsembleError::TooFewTrajectories(n));
    }
    validate_options(problem, options, t_steps)?;
    if let StartPolicy::Fixed(point) = starts {
        if point.len() != problem.dimension() {
            return Err(EnsembleError::StartDimension {
                expected: problem.dimension(),
                got: point.len(),
            });
        }
    }
    let checkpoints = geometric_checkpoints(t_steps);
    let results: Vec<Result<TrajectorySummary, SeedFailure>> = (0..n as u64)
        .into_par_iter()
        .map(|offset| {
            let seed = base_seed + offset;
            let theta1 = starts.sample(problem.dimension(), seed);
            let traj = run(
                problem,
                oracle,
                schedule,
                &theta1,
                t_steps,
                seed,
                options.record_policy,
            )
            .map_err(|e| SeedFailure {
                seed,
                message: e.to_string(),
            })?;
            if let Some(sink) = sink {
                sink(&traj);
            }
            Ok(summarize(
                &traj,
                problem,
                oracle,
                schedule,
                &checkpoints,
                options,
            ))
        })
        .collect();

    let mut summaries = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(summary) => summaries.push(summary),
            Err(failure) => failures.push(failure),
        }
    }
    let stats = aggregate(&summaries, &checkpoints, n, options);
    Ok(EnsembleOutcome {
        stats,
        summaries,
        failures,
    })
}

fn validate_options(
    problem: &Problem,
    options: &EnsembleOptions,
    t_steps: u64,
) -> Result<(), EnsembleError> {
    if options.as_tolerance <= 0.0 {
        return Err(EnsembleError::NonPositive {
            name: "as_tolerance",
            value: options.as_tolerance,
        });
    }
    for &(left, right) in &options.upcross_intervals {
        if !(left < right) {
            return Err(EnsembleError::BadIntervalPair { left, right });
        }
    }
    if let Some(band) = &options.band {
        if !(0.0 < band.a && band.a < band.b && band.b < band.c) || band.m == 0 {
            return Err(EnsembleError::BadBand);
        }
    }
    for &nu in &options.increment_levels {
        if nu <= 0.0 {
            return Err(EnsembleError::NonPositive {
                name: "increment level",
                value: nu,
            });
        }
    }
    if let Some(params) = &options.indicator {
        if params.y <= 0.0 {
            return Err(EnsembleError::NonPositive {
                name: "indicator gate",
                value: params.y,
            });
        }
    }
    if let Some(window) = &options.window {
        if !options.record_policy.keep_noise_vectors {
            return Err(EnsembleError::NeedsNoiseVectors);
        }
        if window.delta <= 0.0 {
            return Err(EnsembleError::NonPositive {
                name: "window delta",
                value: window.delta,
            });
        }
        if window.window < 0.0 {
            return Err(EnsembleError::NonPositive {
                name: "window width",
                value: window.window,
            });
        }
        for &t in &window.times {
            if t == 0 || t > t_steps {
                return Err(EnsembleError::BadWindowTime { t, t_max: t_steps });
            }
        }
    }
    let _ = problem;
    Ok(())
}

/// Reduces one trajectory to its summary. Diverged runs keep identity fields
/// only.
fn summarize(
    traj: &Trajectory,
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    checkpoints: &[u64],
    options: &EnsembleOptions,
) -> TrajectorySummary {
    let mut summary = TrajectorySummary {
        seed: traj.seed,
        diverged_at: traj.diverged_at,
        steps_recorded: traj.records.len() as u64,
        last_f: f64::NAN,
        last_grad_norm: f64::NAN,
        final_f: traj.final_f,
        checkpoint_grad_sq: Vec::new(),
        checkpoint_f_gap: Vec::new(),
        checkpoint_mart_inc: Vec::new(),
        checkpoint_tail_ok: Vec::new(),
        tail_sup_grad: f64::NAN,
        sup_grad_sq: f64::NAN,
        upcross_half: Vec::new(),
        upcross_full: Vec::new(),
        band_upper: None,
        band_lower: None,
        band_min_grad: None,
        band_any_excursion: false,
        increment_sums: Vec::new(),
        descent: None,
        indicator: None,
        window_sups: None,
    };
    if traj.diverged_at.is_some() {
        return summary;
    }
    let f_star = problem.f_star();
    let records = &traj.records;
    let t_steps = records.len() as u64;
    let last = records.last().expect("non-diverged runs have records");
    summary.last_f = last.f_val;
    summary.last_grad_norm = last.grad_norm;

    for &t in checkpoints {
        let r = &records[(t - 1) as usize];
        summary.checkpoint_grad_sq.push(r.grad_norm * r.grad_norm);
        summary.checkpoint_f_gap.push(r.f_val - f_star);
        summary.checkpoint_mart_inc.push(r.mart_inc);
        let lo = (t / 2).max(1);
        let sup = records[(lo - 1) as usize..t as usize]
            .iter()
            .map(|r| r.grad_norm)
            .fold(0.0f64, f64::max);
        summary.checkpoint_tail_ok.push(sup < options.as_tolerance);
        if t == t_steps {
            summary.tail_sup_grad = sup;
        }
    }
    summary.sup_grad_sq = records
        .iter()
        .map(|r| r.grad_norm * r.grad_norm)
        .fold(0.0f64, f64::max);

    if !options.upcross_intervals.is_empty() {
        let gaps = traj.f_gaps(f_star);
        let half = &gaps[..(t_steps / 2) as usize];
        for &(left, right) in &options.upcross_intervals {
            let interval = Interval::new(left, right).expect("validated up front");
            summary.upcross_half.push(count_upcrossings(half, interval));
            summary
                .upcross_full
                .push(count_upcrossings(&gaps, interval));
        }
    }

    if let Some(band) = &options.band {
        let mut floor = f64::INFINITY;
        for r in records {
            let gap = r.f_val - f_star;
            if gap >= band.a && gap < band.c {
                floor = floor.min(r.grad_norm);
            }
        }
        summary.band_min_grad = floor.is_finite().then_some(floor);
        let ladder_bc =
            build_ladder(traj, f_star, band.b, band.c, t_steps).expect("validated band");
        let ladder_ab =
            build_ladder(traj, f_star, band.a, band.b, t_steps).expect("validated band");
        summary.band_any_excursion = !ladder_bc.is_empty() || !ladder_ab.is_empty();
        summary.band_upper =
            Some(grad_quadratic_variation(traj, &ladder_bc, band.m).expect("own ladder"));
        summary.band_lower =
            Some(grad_quadratic_variation(traj, &ladder_ab, band.m + 1).expect("own ladder"));
    }

    for &nu in &options.increment_levels {
        summary
            .increment_sums
            .push(truncated_increment_sum(traj, problem, nu).expect("validated level"));
    }
    if options.descent {
        summary.descent = Some(descent_residuals(traj, problem));
    }
    if let Some(params) = &options.indicator {
        summary.indicator = Some(
            indicator_descent_check(traj, problem, oracle.declared().growth, params.y, params.m)
                .expect("validated gate"),
        );
    }
    if let Some(window) = &options.window {
        let flags = s_delta_flags(traj, problem, window.delta);
        let p = oracle.declared().p;
        let sups = window
            .times
            .iter()
            .map(|&t| {
                martingale_window_sup(traj, t, window.window, schedule, &flags, p)
                    .expect("vectors retained and times validated")
            })
            .collect();
        summary.window_sups = Some(sups);
    }
    summary
}

fn aggregate(
    summaries: &[TrajectorySummary],
    checkpoints: &[u64],
    n_requested: usize,
    options: &EnsembleOptions,
) -> EnsembleStats {
    let alive: Vec<&TrajectorySummary> = summaries
        .iter()
        .filter(|s| s.diverged_at.is_none())
        .collect();
    let diverged_count = summaries.len() - alive.len();
    let frac = |count: usize| {
        if alive.is_empty() {
            0.0
        } else {
            count as f64 / alive.len() as f64
        }
    };

    let mut mean_grad_sq = Vec::with_capacity(checkpoints.len());
    let mut mean_mart_inc = Vec::with_capacity(checkpoints.len());
    let mut median_f_gap = Vec::with_capacity(checkpoints.len());
    let mut as_fraction = Vec::with_capacity(checkpoints.len());
    for k in 0..checkpoints.len() {
        let grad_sq: Vec<f64> = alive.iter().map(|s| s.checkpoint_grad_sq[k]).collect();
        let (mean, stderr) = mean_and_stderr(&grad_sq);
        mean_grad_sq.push(MeanWithError { mean, stderr });
        let mart: Vec<f64> = alive.iter().map(|s| s.checkpoint_mart_inc[k]).collect();
        let (mean, stderr) = mean_and_stderr(&mart);
        mean_mart_inc.push(MeanWithError { mean, stderr });
        let mut gaps: Vec<f64> = alive.iter().map(|s| s.checkpoint_f_gap[k]).collect();
        gaps.sort_unstable_by(f64::total_cmp);
        median_f_gap.push(median_of_sorted(&gaps));
        as_fraction.push(frac(
            alive.iter().filter(|s| s.checkpoint_tail_ok[k]).count(),
        ));
    }

    let upcross_saturation = options
        .upcross_intervals
        .iter()
        .enumerate()
        .map(|(i, &(left, right))| {
            let halves: Vec<f64> = alive.iter().map(|s| s.upcross_half[i] as f64).collect();
            let fulls: Vec<f64> = alive.iter().map(|s| s.upcross_full[i] as f64).collect();
            let saturated = alive
                .iter()
                .filter(|s| s.upcross_full[i] == s.upcross_half[i])
                .count();
            UpcrossSaturation {
                left,
                right,
                mean_half: mean_and_stderr(&halves).0,
                mean_full: mean_and_stderr(&fulls).0,
                saturated_fraction: frac(saturated),
            }
        })
        .collect();

    let sup_values: Vec<f64> = alive.iter().map(|s| s.sup_grad_sq).collect();
    EnsembleStats {
        n_trajectories: n_requested,
        checkpoints: checkpoints.to_vec(),
        mean_grad_sq,
        mean_mart_inc,
        median_f_gap,
        as_converged_fraction: as_fraction.last().copied().unwrap_or(0.0),
        as_fraction,
        as_tolerance: options.as_tolerance,
        as_criterion: format!(
            "empirical a.s. proxy: sup grad_norm over [t/2, t] below {}",
            options.as_tolerance
        ),
        upcross_saturation,
        sup_grad_sq_mean: mean_and_stderr(&sup_values).0,
        diverged_count,
    }
}

pub(crate) fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Convenience wrapper over the shared mean/standard-error fold.
pub fn mean_with_stderr(values: &[f64]) -> MeanWithError {
    let (mean, stderr) = mean_and_stderr(values);
    MeanWithError { mean, stderr }
}

/// Band recursion check assembled from ensemble summaries.
///
/// Equivalent to the trajectory-based check in `diagnostics`, but works from
/// the per-seed reductions so full records need not be retained. Summaries
/// must come from an ensemble run with matching [`BandParams`].
#[allow(clippy::too_many_arguments)]
pub fn band_recursion_check(
    summaries: &[TrajectorySummary],
    band: &BandParams,
    problem: &Problem,
    growth: f64,
    p: f64,
    m0: f64,
    schedule: &StepSizeSchedule,
    c1_scale: f64,
) -> Result<BandRecursionCheck, DiagnosticsError> {
    if !(0.0 < band.a && band.a < band.b && band.b < band.c) {
        return Err(DiagnosticsError::BadBand);
    }
    let mut samples = BandSamples {
        upper: Vec::new(),
        lower: Vec::new(),
        delta_hat: f64::INFINITY,
        any_excursion: false,
    };
    for summary in summaries.iter().filter(|s| s.diverged_at.is_none()) {
        let (Some(upper), Some(lower)) = (summary.band_upper, summary.band_lower) else {
            continue;
        };
        samples.upper.push(upper);
        samples.lower.push(lower);
        samples.any_excursion |= summary.band_any_excursion;
        if let Some(floor) = summary.band_min_grad {
            samples.delta_hat = samples.delta_hat.min(floor);
        }
    }
    band_recursion_from_samples(
        samples, band.a, band.b, band.m, problem, growth, p, m0, schedule, c1_scale,
    )
}

/// How many trajectories finished within `tolerance` of a certified critical
/// value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalValueMatch {
    /// `None` when the problem certifies no critical values (inconclusive).
    pub fraction: Option<f64>,
    /// Matched critical value per non-diverged trajectory, seed-ordered.
    pub matches: Vec<(u64, Option<f64>)>,
    pub diverged_excluded: usize,
}

/// Matches each trajectory's last recorded objective against the certified
/// critical values. Diverged trajectories join neither numerator nor
/// denominator.
pub fn critical_value_match(
    summaries: &[TrajectorySummary],
    problem: &Problem,
    tolerance: f64,
) -> CriticalValueMatch {
    let critical = &problem.certificate().critical_values;
    let f_star = problem.f_star();
    let alive: Vec<&TrajectorySummary> = summaries
        .iter()
        .filter(|s| s.diverged_at.is_none())
        .collect();
    let diverged_excluded = summaries.len() - alive.len();
    if critical.is_empty() {
        return CriticalValueMatch {
            fraction: None,
            matches: alive.iter().map(|s| (s.seed, None)).collect(),
            diverged_excluded,
        };
    }
    let mut matched = 0usize;
    let matches: Vec<(u64, Option<f64>)> = alive
        .iter()
        .map(|s| {
            let gap = s.last_f - f_star;
            let best = critical
                .iter()
                .copied()
                .min_by(|a, b| (gap - a).abs().total_cmp(&(gap - b).abs()))
                .filter(|v| (gap - v).abs() <= tolerance);
            if best.is_some() {
                matched += 1;
            }
            (s.seed, best)
        })
        .collect();
    let fraction = if alive.is_empty() {
        None
    } else {
        Some(matched as f64 / alive.len() as f64)
    };
    CriticalValueMatch {
        fraction,
        matches,
        diverged_excluded,
    }
}

/// The two-point step-noise law: value `atom` with probability `1/atom^2`,
/// zero otherwise.
///
/// Its second moment is exactly one for every atom, yet along a path of
/// independent draws with growing atoms the nonzero jumps recur only finitely
/// often, with tail probability controlled by the inverse-square sum. It
/// separates moment conditions from pathwise behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoPointLaw {
    atom: u64,
}

impl TwoPointLaw {
    pub fn new(atom: u64) -> Result<Self, EnsembleError> {
        if atom == 0 {
            return Err(EnsembleError::DegenerateAtom);
        }
        Ok(TwoPointLaw { atom })
    }

    pub fn atom(&self) -> u64 {
        self.atom
    }

    pub fn p_atom(&self) -> f64 {
        let a = self.atom as f64;
        1.0 / (a * a)
    }

    pub fn p_zero(&self) -> f64 {
        1.0 - self.p_atom()
    }

    /// `atom^2 * (1/atom^2)`, computed as a quotient of one rounded quantity
    /// by itself so the result is exactly one for every atom.
    #[allow(clippy::eq_op)]
    pub fn second_moment_exact(&self) -> f64 {
        let atom_sq = self.atom as f64 * self.atom as f64;
        atom_sq / atom_sq
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if rng.gen::<f64>() < self.p_atom() {
            self.atom as f64
        } else {
            0.0
        }
    }
}

/// Monte-Carlo estimate of the tail event for two-point paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailEventEstimate {
    /// Fraction of paths with at least one nonzero draw at an index beyond
    /// the threshold.
    pub fraction: f64,
    pub stderr: f64,
    /// Inverse-square sum over the tail indices; the union bound the
    /// fraction is compared against.
    pub tail_sum: f64,
    pub paths: usize,
    pub horizon: u64,
    pub threshold: u64,
}

/// Fraction of independent paths `(draws from TwoPointLaw(n))_{n <= horizon}`
/// that see any nonzero draw at an index `n > threshold`.
///
/// Joint simulation is exact but runs in roughly `horizon + paths/threshold`
/// work instead of `horizon * paths`: for each index the number of affected
/// paths is binomial, and which paths they are is a uniform subset.
pub fn tail_event_fraction(
    paths: usize,
    horizon: u64,
    threshold: u64,
    seed: u64,
) -> Result<TailEventEstimate, EnsembleError> {
    if paths == 0 {
        return Err(EnsembleError::NoPaths);
    }
    if threshold >= horizon {
        return Err(EnsembleError::ThresholdBeyondHorizon { threshold, horizon });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hit = vec![false; paths];
    let mut tail_sum = 0.0;
    for n in threshold + 1..=horizon {
        let p = 1.0 / (n as f64 * n as f64);
        tail_sum += p;
        let count = Binomial::new(paths as u64, p)
            .expect("probability in (0, 1)")
            .sample(&mut rng);
        // The affected paths form a uniform subset of the given size; draw
        // it by rejection, which is cheap because count << paths.
        let mut marked = 0u64;
        let mut chosen = std::collections::HashSet::new();
        while marked < count {
            let idx = rng.gen_range(0..paths);
            if chosen.insert(idx) {
                hit[idx] = true;
                marked += 1;
            }
        }
    }
    let fraction = hit.iter().filter(|&&h| h).count() as f64 / paths as f64;
    let stderr = (fraction * (1.0 - fraction) / paths as f64).sqrt();
    Ok(TailEventEstimate {
        fraction,
        stderr,
        tail_sum,
        paths,
        horizon,
        threshold,
    })
}
