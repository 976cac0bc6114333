//! Convergence diagnostics over trajectory records.
//!
//! Everything here is a pure function of immutable records: interval
//! up-crossing counts, the three-phase stopping-time ladder, excursion-window
//! quadratic variation of the gradient, residuals of the per-step descent
//! inequality, the explicit constants that bound truncated loss increments
//! and tie neighbouring loss bands together, and windowed martingale suprema.
//!
//! Scalar checks work from the streamed records alone. The windowed
//! martingale supremum additionally needs the retained noise vectors, and
//! says so when they are missing.
//!
//! Inequalities that hold in expectation are exposed as single-trajectory
//! statistics; the ensemble layer averages them across seeds and attaches
//! Monte-Carlo error bars. A single trajectory exceeding such a bound is not
//! a failure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Trajectory;
use crate::problem::{Problem, ProblemError};
use crate::schedule::{ScheduleError, StepSizeSchedule, Verdict};
use crate::util::l2_norm;

/// Residual slack allowed per step, scaled by `1 + |f|`.
pub const DESCENT_TOLERANCE: f64 = 1e-9;

/// Relative slack for the gradient-versus-loss-gap bound.
pub const LOSS_BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("interval needs left < right, got [{left}, {right})")]
    BadInterval { left: f64, right: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("band thresholds must satisfy 0 < a < b < c")]
    BadBand,
    #[error("truncation {truncation} exceeds the {len}-step record")]
    TruncationBeyondRecord { truncation: u64, len: u64 },
    #[error("step index {t} lies outside the {len}-step record")]
    StepOutOfRange { t: u64, len: u64 },
    #[error("ladder was built from a different trajectory")]
    LadderMismatch,
    #[error("noise vectors were not retained; rerun with record_policy.keep_noise_vectors")]
    VectorsNotRetained,
    #[error("step-size family is not in the relaxed class, the truncation constant is infinite")]
    NotRelaxed,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Half-open target `[left, right)` threshold pair for up-crossings: a
/// crossing starts strictly below `left` and ends at or above `right`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    left: f64,
    right: f64,
}

impl Interval {
    /// `right` may be `f64::INFINITY`.
    pub fn new(left: f64, right: f64) -> Result<Self, DiagnosticsError> {
        if !(left < right) {
            return Err(DiagnosticsError::BadInterval { left, right });
        }
        Ok(Self { left, right })
    }

    pub fn left(&self) -> f64 {
        self.left
    }

    pub fn right(&self) -> f64 {
        self.right
    }
}

/// Number of completed up-crossings of the interval by the sequence.
///
/// A crossing is an index pair `(t1, t2)` with `values[t1] < left`,
/// `values[t2] >= right`, and every strictly-between entry inside
/// `[left, right)`. Crossings cannot share indices, which makes the greedy
/// left-to-right scan canonical: it finds exactly the maximal disjoint set.
pub fn count_upcrossings(values: &[f64], interval: Interval) -> u64 {
    let (e, o) = (interval.left, interval.right);
    let mut count = 0u64;
    let mut below = false;
    for &x in values {
        if x >= o {
            if below {
                count += 1;
                below = false;
            }
        } else if x < e {
            // A fresh start point; any pending crossing attempt is abandoned
            // because an intermediate value left [e, o) downward.
            below = true;
        }
    }
    count
}

/// A stopping time, possibly never reached within the record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopTime {
    Finite(u64),
    Infinite,
}

impl StopTime {
    /// `min(time, t_max)`; infinite times truncate to the horizon.
    pub fn truncated(self, t_max: u64) -> u64 {
        match self {
            StopTime::Finite(t) => t.min(t_max),
            StopTime::Infinite => t_max,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, StopTime::Finite(_))
    }
}

/// Alternating first-passage times of the loss gap across two thresholds.
///
/// Triples repeat the pattern: first time the gap reaches `h1` or above,
/// first subsequent time it reaches `h2` or falls back below `h1`, first
/// subsequent time it falls below `h1`. Each search starts at the previous
/// time (not after it), so consecutive entries may coincide. Generation stops
/// at the first phase that never occurs within the record; a triple is stored
/// with `Infinite` tail entries in that case.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTimeLadder {
    h1: f64,
    h2: f64,
    truncation: u64,
    triples: Vec<[StopTime; 3]>,
    fingerprint: String,
}

impl StoppingTimeLadder {
    pub fn h1(&self) -> f64 {
        self.h1
    }

    pub fn h2(&self) -> f64 {
        self.h2
    }

    pub fn truncation(&self) -> u64 {
        self.truncation
    }

    pub fn triples(&self) -> &[[StopTime; 3]] {
        &self.triples
    }

    /// Flattened time sequence `mu_1, mu_2, ...`.
    pub fn times(&self) -> Vec<StopTime> {
        self.triples.iter().flatten().copied().collect()
    }

    /// Times clamped to the truncation horizon.
    pub fn truncated_times(&self) -> Vec<u64> {
        self.times()
            .into_iter()
            .map(|t| t.truncated(self.truncation))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Majorant for the number of `(h1, h2)` up-crossings within the horizon:
    /// one plus, for each triple after the first, whether the gap at the
    /// truncated middle time already reached `h2`.
    ///
    /// `gaps[t-1]` must be the loss-gap sequence the ladder was built from.
    pub fn upcrossing_bound(&self, gaps: &[f64]) -> u64 {
        1 + self
            .triples
            .iter()
            .skip(1)
            .filter(|triple| {
                let mid = triple[1].truncated(self.truncation);
                gaps[(mid - 1) as usize] >= self.h2
            })
            .count() as u64
    }
}

/// Builds the stopping-time ladder of the trajectory's loss gap
/// `f(theta_t) - f_star` with thresholds `h1 < h2` and horizon `truncation`.
///
/// `h2` may be infinite, in which case the middle phase can fire only by
/// dropping back below `h1`.
pub fn build_ladder(
    trajectory: &Trajectory,
    f_star: f64,
    h1: f64,
    h2: f64,
    truncation: u64,
) -> Result<StoppingTimeLadder, DiagnosticsError> {
    if !(h1 < h2) {
        return Err(DiagnosticsError::BadInterval {
            left: h1,
            right: h2,
        });
    }
    let gaps = trajectory.f_gaps(f_star);
    let n = gaps.len() as u64;
    if truncation == 0 || truncation > n {
        return Err(DiagnosticsError::TruncationBeyondRecord { truncation, len: n });
    }
    let first = |from: u64, pred: &dyn Fn(f64) -> bool| -> StopTime {
        (from..=n)
            .find(|&t| pred(gaps[(t - 1) as usize]))
            .map_or(StopTime::Infinite, StopTime::Finite)
    };
    let mut triples = Vec::new();
    let mut start = 1u64;
    loop {
        let StopTime::Finite(rise) = first(start, &|g| g >= h1) else {
            break;
        };
        let mid = first(rise, &|g| g >= h2 || g < h1);
        let StopTime::Finite(mid_t) = mid else {
            triples.push([
                StopTime::Finite(rise),
                StopTime::Infinite,
                StopTime::Infinite,
            ]);
            break;
        };
        let fall = first(mid_t, &|g| g < h1);
        let StopTime::Finite(fall_t) = fall else {
            triples.push([StopTime::Finite(rise), mid, StopTime::Infinite]);
            break;
        };
        triples.push([StopTime::Finite(rise), mid, fall]);
        // The gap at fall_t is < h1, so the next rise is strictly later and
        // the scan advances every round.
        start = fall_t;
    }
    Ok(StoppingTimeLadder {
        h1,
        h2,
        truncation,
        triples,
        fingerprint: trajectory.fingerprint().to_string(),
    })
}

/// First step index at or after `t0` whose gradient norm is at most
/// `upsilon`, if any.
pub fn hitting_time(trajectory: &Trajectory, t0: u64, upsilon: f64) -> Option<u64> {
    assert!(t0 >= 1, "step indices are 1-based");
    trajectory
        .records
        .iter()
        .skip(t0 as usize - 1)
        .find(|r| r.grad_norm <= upsilon)
        .map(|r| r.t)
}

/// Order-`m` quadratic variation of the gradient over the ladder's excursion
/// windows: `sum eps_t^m * grad_norm_t^2` for `t` from each triple's first
/// time to just before its middle time, truncated to the horizon.
pub fn grad_quadratic_variation(
    trajectory: &Trajectory,
    ladder: &StoppingTimeLadder,
    m: u32,
) -> Result<f64, DiagnosticsError> {
    assert!(m >= 1, "variation order must be at least 1");
    if ladder.fingerprint != trajectory.fingerprint() {
        return Err(DiagnosticsError::LadderMismatch);
    }
    let horizon = ladder.truncation;
    let mut sum = 0.0;
    for triple in &ladder.triples {
        let lo = triple[0].truncated(horizon);
        let hi = triple[1].truncated(horizon); // window is [lo, hi - 1]
        for t in lo..hi {
            let r = &trajectory.records[(t - 1) as usize];
            sum += r.eps.powi(m as i32) * r.grad_norm * r.grad_norm;
        }
    }
    Ok(sum)
}

/// Worst-case residual of the per-step descent inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentCheck {
    /// Largest raw residual.
    pub max_residual: f64,
    /// Largest residual scaled by `1 + |f(theta_t)|`.
    pub max_normalized: f64,
    /// Steps whose residual exceeds the scaled tolerance.
    pub violations: u64,
    pub steps: u64,
}

impl DescentCheck {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Residuals of `f(theta_{t+1}) - f(theta_t) <= -eps grad^2 + M_t +
/// (L/2) eps^2 g^2` under the problem's certified curvature bound.
///
/// The residual is the left side minus the right side; positive values beyond
/// `DESCENT_TOLERANCE * (1 + |f|)` mean the certified constant is wrong or
/// the records are inconsistent.
pub fn descent_residuals(trajectory: &Trajectory, problem: &Problem) -> DescentCheck {
    let lipschitz = problem.lipschitz();
    let mut max_residual = f64::NEG_INFINITY;
    let mut max_normalized = f64::NEG_INFINITY;
    let mut violations = 0u64;
    let n = trajectory.records.len();
    for (i, r) in trajectory.records.iter().enumerate() {
        let f_next = if i + 1 < n {
            trajectory.records[i + 1].f_val
        } else {
            trajectory.final_f
        };
        let delta_f = f_next - r.f_val;
        let residual = delta_f + r.eps * r.grad_norm * r.grad_norm
            - r.mart_inc
            - 0.5 * lipschitz * r.eps * r.eps * r.g_norm_sq;
        let normalized = residual / (1.0 + r.f_val.abs());
        max_residual = max_residual.max(residual);
        max_normalized = max_normalized.max(normalized);
        if normalized > DESCENT_TOLERANCE {
            violations += 1;
        }
    }
    DescentCheck {
        max_residual,
        max_normalized,
        violations,
        steps: n as u64,
    }
}

/// Sum of loss increments that are both started inside the sublevel region
/// and larger than `nu`: `sum_t (1[gap_t < d_eta] * |f_{t+1} - f_t| - nu)+`.
///
/// The single-trajectory sum; its ensemble mean is what the truncation
/// constant bounds.
pub fn truncated_increment_sum(
    trajectory: &Trajectory,
    problem: &Problem,
    nu: f64,
) -> Result<f64, DiagnosticsError> {
    if nu <= 0.0 {
        return Err(DiagnosticsError::NonPositive {
            name: "nu",
            value: nu,
        });
    }
    let f_star = problem.f_star();
    let d_eta = problem.certificate().d_eta;
    let n = trajectory.records.len();
    let mut sum = 0.0;
    for (i, r) in trajectory.records.iter().enumerate() {
        if r.f_val - f_star >= d_eta {
            continue;
        }
        let f_next = if i + 1 < n {
            trajectory.records[i + 1].f_val
        } else {
            trajectory.final_f
        };
        sum += ((f_next - r.f_val).abs() - nu).max(0.0);
    }
    Ok(sum)
}

/// Coefficient in front of the step-size power sum in the truncated-increment
/// bound:
/// `(1 + D/nu) * L * (2/p) * (4 (1 + D/nu) L (1 - 2/p) / nu)^((p-2)/2)`.
///
/// Vanishes as `nu` grows, reflecting that large truncation levels clip
/// everything.
pub fn c_nu_coefficient(nu: f64, d_eta: f64, lipschitz: f64, p: f64) -> f64 {
    let ratio = 1.0 + d_eta / nu;
    ratio
        * lipschitz
        * (2.0 / p)
        * (4.0 * ratio * lipschitz * (1.0 - 2.0 / p) / nu).powf((p - 2.0) / 2.0)
}

/// Bound on the expected sum of truncated loss increments:
/// coefficient times `m0^p` times a certified upper bound on `sum eps_t^p`.
///
/// Requires the schedule to be in the relaxed class, otherwise the power sum
/// is infinite and so is the constant.
pub fn compute_c_nu(
    nu: f64,
    d_eta: f64,
    lipschitz: f64,
    p: f64,
    m0: f64,
    schedule: &StepSizeSchedule,
) -> Result<f64, DiagnosticsError> {
    if nu <= 0.0 {
        return Err(DiagnosticsError::NonPositive {
            name: "nu",
            value: nu,
        });
    }
    if schedule.classify().relaxed != Verdict::Yes {
        return Err(DiagnosticsError::NotRelaxed);
    }
    let power_sum = schedule.power_sum_bound(p)?;
    Ok(c_nu_coefficient(nu, d_eta, lipschitz, p) * m0.powf(p) * power_sum)
}

/// Explicit constants tying the band `[b, c)` variation to the band `[a, b)`
/// variation one order higher:
///
/// `C1 = ((3bL/(b-a) + L/2) * (2G/delta^2) + 12Lb^2G/(b-a)^2) * (1 + 1/delta^2)`
/// `C2 = (6ab/(b-a)) * eps_1^((m-1)/2) * (eps_1^((m-1)/2) + eps_1^(m-1)) * C_half_gap`
///
/// where `delta_ab` lower-bounds the gradient norm on the loss shell between
/// `a` and the outer threshold, and `C_half_gap` is the truncated-increment
/// constant at level `(b-a)/2`.
#[allow(clippy::too_many_arguments)]
pub fn compute_c1_c2(
    a: f64,
    b: f64,
    m: u32,
    lipschitz: f64,
    growth: f64,
    delta_ab: f64,
    schedule: &StepSizeSchedule,
    c_half_gap: f64,
) -> Result<(f64, f64), DiagnosticsError> {
    if !(0.0 < a && a < b) {
        return Err(DiagnosticsError::BadBand);
    }
    if delta_ab <= 0.0 {
        return Err(DiagnosticsError::NonPositive {
            name: "delta_ab",
            value: delta_ab,
        });
    }
    assert!(m >= 1, "variation order must be at least 1");
    let width = b - a;
    let delta_sq = delta_ab * delta_ab;
    let c1 = ((3.0 * b * lipschitz / width + lipschitz / 2.0) * (2.0 * growth / delta_sq)
        + 12.0 * lipschitz * b * b * growth / (width * width))
        * (1.0 + 1.0 / delta_sq);
    let eps1 = schedule.step_size(1);
    let half_pow = eps1.powf((m as f64 - 1.0) / 2.0);
    let full_pow = eps1.powi(m as i32 - 1);
    let c2 = (6.0 * a * b / width) * half_pow * (half_pow + full_pow) * c_half_gap;
    Ok((c1, c2))
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandRecursionOutcome {
    Passed,
    Failed,
    /// No usable data; the reason says what was missing.
    Inconclusive(String),
}

/// Ensemble comparison of excursion variations across neighbouring bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRecursionCheck {
    /// Ensemble mean of the order-`m` variation over `[b, c)` excursions.
    pub lhs: f64,
    pub lhs_halfwidth: f64,
    /// `C1 * mean + C2` with the mean taken over order-`m+1` variations on
    /// `[a, b)` excursions.
    pub rhs: f64,
    pub rhs_halfwidth: f64,
    pub c1: f64,
    pub c2: f64,
    /// Sampled lower bound for the gradient norm on the `[a, c)` loss shell.
    pub delta_hat: Option<f64>,
    pub outcome: BandRecursionOutcome,
}

impl BandRecursionCheck {
    pub fn passed(&self) -> bool {
        self.outcome == BandRecursionOutcome::Passed
    }
}

/// Checks that the mean `[b, c)` variation of order `m` is bounded by
/// `C1 * (mean [a, b) variation of order m+1) + C2`, with two combined
/// Monte-Carlo halfwidths of slack.
#[allow(clippy::too_many_arguments)]
pub fn check_recursive_inequality(
    trajectories: &[Trajectory],
    a: f64,
    b: f64,
    c: f64,
    m: u32,
    problem: &Problem,
    growth: f64,
    p: f64,
    m0: f64,
    schedule: &StepSizeSchedule,
) -> Result<BandRecursionCheck, DiagnosticsError> {
    check_recursive_inequality_scaled(
        trajectories,
        a,
        b,
        c,
        m,
        problem,
        growth,
        p,
        m0,
        schedule,
        1.0,
    )
}

/// Same check with the first constant multiplied by `c1_scale`.
///
/// Scales below 1 deliberately weaken the bound; they exist so tests can
/// confirm the checker actually fails when the constant is wrong.
#[allow(clippy::too_many_arguments)]
pub fn check_recursive_inequality_scaled(
    trajectories: &[Trajectory],
    a: f64,
    b: f64,
    c: f64,
    m: u32,
    problem: &Problem,
    growth: f64,
    p: f64,
    m0: f64,
    schedule: &StepSizeSchedule,
    c1_scale: f64,
) -> Result<BandRecursionCheck, DiagnosticsError> {
    if !(0.0 < a && a < b && b < c) {
        return Err(DiagnosticsError::BadBand);
    }
    assert!(m >= 1, "variation order must be at least 1");
    let f_star = problem.f_star();

    // The gradient-norm floor over the sampled loss shell [a, c); stays
    // infinite when no record ever lands there.
    let mut delta_hat = f64::INFINITY;
    for traj in trajectories {
        for r in &traj.records {
            let gap = r.f_val - f_star;
            if gap >= a && gap < c {
                delta_hat = delta_hat.min(r.grad_norm);
            }
        }
    }

    let mut samples = BandSamples {
        upper: Vec::with_capacity(trajectories.len()),
        lower: Vec::with_capacity(trajectories.len()),
        delta_hat,
        any_excursion: false,
    };
    for traj in trajectories {
        let horizon = traj.records.len() as u64;
        if horizon == 0 {
            continue;
        }
        let ladder_bc = build_ladder(traj, f_star, b, c, horizon)?;
        let ladder_ab = build_ladder(traj, f_star, a, b, horizon)?;
        samples.any_excursion |= !ladder_bc.is_empty() || !ladder_ab.is_empty();
        samples
            .upper
            .push(grad_quadratic_variation(traj, &ladder_bc, m)?);
        samples
            .lower
            .push(grad_quadratic_variation(traj, &ladder_ab, m + 1)?);
    }
    band_recursion_from_samples(samples, a, b, m, problem, growth, p, m0, schedule, c1_scale)
}

/// Per-trajectory inputs to the band recursion, extracted wherever the
/// trajectory records happen to live.
#[derive(Debug, Clone)]
pub(crate) struct BandSamples {
    /// Order-`m` variations over `[b, c)` excursions, one per trajectory.
    pub upper: Vec<f64>,
    /// Order-`m+1` variations over `[a, b)` excursions, one per trajectory.
    pub lower: Vec<f64>,
    /// Gradient-norm floor over the `[a, c)` shell; infinite when unvisited.
    pub delta_hat: f64,
    pub any_excursion: bool,
}

/// Shared tail of the band recursion check; the public trajectory-based entry
/// point and the ensemble's streaming summaries both end up here.
#[allow(clippy::too_many_arguments)]
pub(crate) fn band_recursion_from_samples(
    samples: BandSamples,
    a: f64,
    b: f64,
    m: u32,
    problem: &Problem,
    growth: f64,
    p: f64,
    m0: f64,
    schedule: &StepSizeSchedule,
    c1_scale: f64,
) -> Result<BandRecursionCheck, DiagnosticsError> {
    let inconclusive = |reason: &str| BandRecursionCheck {
        lhs: 0.0,
        lhs_halfwidth: 0.0,
        rhs: 0.0,
        rhs_halfwidth: 0.0,
        c1: 0.0,
        c2: 0.0,
        delta_hat: None,
        outcome: BandRecursionOutcome::Inconclusive(reason.to_string()),
    };
    if !samples.delta_hat.is_finite() {
        return Ok(inconclusive("no samples with loss gap in [a, c)"));
    }
    if samples.delta_hat <= 0.0 {
        return Ok(inconclusive(
            "sampled gradient floor on the [a, c) shell is zero",
        ));
    }
    if !samples.any_excursion {
        return Ok(inconclusive("no excursions reached the band thresholds"));
    }

    let certificate = problem.certificate();
    let c_half_gap = compute_c_nu(
        (b - a) / 2.0,
        certificate.d_eta,
        certificate.lipschitz,
        p,
        m0,
        schedule,
    )?;
    let (base_c1, c2) = compute_c1_c2(
        a,
        b,
        m,
        certificate.lipschitz,
        growth,
        samples.delta_hat,
        schedule,
        c_half_gap,
    )?;
    let c1 = base_c1 * c1_scale;
    let (lhs, lhs_halfwidth) = mean_and_stderr(&samples.upper);
    let (x_mean, x_stderr) = mean_and_stderr(&samples.lower);
    let rhs = c1 * x_mean + c2;
    let rhs_halfwidth = c1 * x_stderr;
    let outcome = if lhs <= rhs + 2.0 * (lhs_halfwidth + rhs_halfwidth) {
        BandRecursionOutcome::Passed
    } else {
        BandRecursionOutcome::Failed
    };
    Ok(BandRecursionCheck {
        lhs,
        lhs_halfwidth,
        rhs,
        rhs_halfwidth,
        c1,
        c2,
        delta_hat: Some(samples.delta_hat),
        outcome,
    })
}

/// Sample mean and its standard error (zero for fewer than two values).
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Membership flags for the critical band: step `t` is flagged when
/// `f(theta_t)` lies within `delta` of a certified critical value.
pub fn s_delta_flags(trajectory: &Trajectory, problem: &Problem, delta: f64) -> Vec<bool> {
    trajectory
        .records
        .iter()
        .map(|r| problem.in_critical_band(r.f_val, delta))
        .collect()
}

/// Windowed supremum of the flagged noise sums started at step `t`:
/// `sup_k norm(sum_{i=t}^{k} 1[flag_i] eps_i (grad_i - g_i))^(2p-2)`,
/// with `k` running to the step index whose elapsed schedule time first
/// exceeds `cumulative(t) + t_window` (clamped to the record end).
///
/// Needs the per-step noise vectors retained by the record policy.
pub fn martingale_window_sup(
    trajectory: &Trajectory,
    t: u64,
    t_window: f64,
    schedule: &StepSizeSchedule,
    flags: &[bool],
    p: f64,
) -> Result<f64, DiagnosticsError> {
    let noise = trajectory
        .noise_vectors
        .as_ref()
        .ok_or(DiagnosticsError::VectorsNotRetained)?;
    let n = trajectory.records.len() as u64;
    if t == 0 || t > n {
        return Err(DiagnosticsError::StepOutOfRange { t, len: n });
    }
    assert_eq!(flags.len() as u64, n, "one membership flag per record");
    if t_window < 0.0 {
        return Err(DiagnosticsError::NonPositive {
            name: "t_window",
            value: t_window,
        });
    }
    let k_end = schedule
        .index_at(schedule.cumulative(t) + t_window)
        .max(t)
        .min(n);
    let d = noise[0].len();
    let mut acc = vec![0.0; d];
    let mut sup = 0.0f64;
    for k in t..=k_end {
        let i = (k - 1) as usize;
        if flags[i] {
            let eps = trajectory.records[i].eps;
            for (a, v) in acc.iter_mut().zip(&noise[i]) {
                *a += eps * v;
            }
        }
        sup = sup.max(l2_norm(&acc));
    }
    Ok(sup.powf(2.0 * p - 2.0))
}

/// Worst violation of the gradient-versus-loss-gap bound over sample points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBoundCheck {
    /// Largest `grad_norm^2 - 2L(f - f_star)` seen.
    pub max_violation: f64,
    /// Same, scaled by `max(1, grad_norm^2)`.
    pub max_relative: f64,
    pub points: u64,
    pub pass: bool,
}

/// Checks `norm(grad f)^2 <= 2L (f - f_star)` at each point, a consequence
/// of smoothness plus lower-boundedness under the certified constants.
pub fn loss_bound_check(
    problem: &Problem,
    points: &[Vec<f64>],
) -> Result<LossBoundCheck, DiagnosticsError> {
    let lipschitz = problem.lipschitz();
    let f_star = problem.f_star();
    let mut max_violation = f64::NEG_INFINITY;
    let mut max_relative = f64::NEG_INFINITY;
    for point in points {
        let f = problem.value(point)?;
        let grad = problem.gradient(point)?;
        let grad_sq = grad.iter().map(|g| g * g).sum::<f64>();
        let violation = grad_sq - 2.0 * lipschitz * (f - f_star);
        max_violation = max_violation.max(violation);
        max_relative = max_relative.max(violation / grad_sq.max(1.0));
    }
    Ok(LossBoundCheck {
        max_violation,
        max_relative,
        points: points.len() as u64,
        pass: max_relative <= LOSS_BOUND_TOLERANCE,
    })
}

/// Residual summary for the indicator-gated descent inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndicatorDescentCheck {
    /// Mean residual over all steps (inactive steps contribute zero).
    pub mean_residual: f64,
    pub max_residual: f64,
    /// Steps where the gradient indicator fired.
    pub active_steps: u64,
    pub steps: u64,
}

/// Per-step residuals of the gated inequality
/// `eps^m 1[grad^2 >= y] grad^2 <= eps^(m-1) 1 (f_t - f_{t+1}) +
/// eps^(m-1) 1 M_t + (LG/2)(1 + 1/y) eps^(m+1) 1 grad^2`.
///
/// Residuals are left minus right with all quantities realized, so they hold
/// only in expectation: average across an ensemble before judging. With zero
/// noise they are nonpositive pathwise.
pub fn indicator_descent_check(
    trajectory: &Trajectory,
    problem: &Problem,
    growth: f64,
    y: f64,
    m: u32,
) -> Result<IndicatorDescentCheck, DiagnosticsError> {
    if y <= 0.0 {
        return Err(DiagnosticsError::NonPositive {
            name: "y",
            value: y,
        });
    }
    assert!(m >= 1, "step-size order must be at least 1");
    let lipschitz = problem.lipschitz();
    let slope = 0.5 * lipschitz * growth * (1.0 + 1.0 / y);
    let n = trajectory.records.len();
    let mut sum = 0.0;
    let mut max_residual = f64::NEG_INFINITY;
    let mut active = 0u64;
    for (i, r) in trajectory.records.iter().enumerate() {
        let grad_sq = r.grad_norm * r.grad_norm;
        if grad_sq < y {
            max_residual = max_residual.max(0.0);
            continue;
        }
        active += 1;
        let f_next = if i + 1 < n {
            trajectory.records[i + 1].f_val
        } else {
            trajectory.final_f
        };
        let drop = r.f_val - f_next;
        let eps_low = r.eps.powi(m as i32 - 1);
        let residual = r.eps.powi(m as i32) * grad_sq
            - eps_low * drop
            - eps_low * r.mart_inc
            - slope * r.eps.powi(m as i32 + 1) * grad_sq;
        sum += residual;
        max_residual = max_residual.max(residual);
    }
    Ok(IndicatorDescentCheck {
        mean_residual: if n == 0 { 0.0 } else { sum / n as f64 },
        max_residual,
        active_steps: active,
        steps: n as u64,
    })
}

/// One serializable line of a diagnostics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_name: String,
    pub params: serde_json::Value,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub tolerance: Option<f64>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub stderr_halfwidth: Option<f64>,
}

/// Named results of every diagnostic an experiment ran.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub results: Vec<CheckResult>,
}

impl DiagnosticsReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn push(&mut self, result: CheckResult) {
        self.results.push(result);
    }
}
