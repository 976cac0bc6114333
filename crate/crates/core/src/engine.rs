//! The iteration loop: `theta_{t+1} = theta_t - eps_t * g_t`.
//!
//! A run produces a [`Trajectory`]: one scalar record per step plus optional
//! iterate and noise-vector retention, a replay fingerprint, and the rng
//! stream position. Runs are deterministic in the seed, and a finished
//! trajectory can be resumed to a longer horizon with records identical to
//! what the longer run would have produced, because the continuation reuses
//! the stored iterate and stream position.
//!
//! Non-finite values end a run early: the trajectory keeps every record up to
//! the last finite step and carries a divergence marker instead of an error.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::oracle::GradientOracle;
use crate::problem::Problem;
use crate::schedule::StepSizeSchedule;
use crate::util::{all_finite, dot};

/// Errors from running or resuming trajectories.
#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error(
        "dimension mismatch: problem is {expected}-dimensional, start point has {got} entries"
    )]
    DimensionMismatch { expected: usize, got: usize },
    #[error("schedule serves only {horizon} steps but {requested} were requested")]
    ScheduleTooShort { horizon: u64, requested: u64 },
    #[error(
        "replay fingerprint mismatch: trajectory was produced under a different configuration"
    )]
    FingerprintMismatch,
    #[error("cannot resume: trajectory diverged after step {0}")]
    ResumeAfterDivergence(u64),
    #[error("step count must be at least 1")]
    EmptyRun,
}

/// What a run retains beyond the scalar records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordPolicy {
    /// Keep every iterate `theta_t`.
    #[serde(default)]
    pub keep_iterates: bool,
    /// Keep every noise vector `grad f(theta_t) - g_t`; required by the
    /// windowed martingale diagnostics.
    #[serde(default)]
    pub keep_noise_vectors: bool,
}

/// Scalars recorded at step `t` (before the update is applied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub eps: f64,
    /// Objective value `f(theta_t)`.
    pub f_val: f64,
    /// `norm(grad f(theta_t))`.
    pub grad_norm: f64,
    /// Martingale increment `eps_t * <grad f, grad f - g>`.
    pub mart_inc: f64,
    /// `norm(g_t)^2`.
    pub g_norm_sq: f64,
}

/// Serializable state sufficient to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayState {
    pub fingerprint: String,
    pub seed: u64,
    /// Next step index to execute.
    pub next_t: u64,
    pub theta: Vec<f64>,
    pub rng_word_pos: u128,
}

/// A completed (or diverged) run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub initial_point: Vec<f64>,
    pub records: Vec<StepRecord>,
    /// Iterate after the last recorded step (the last finite iterate when the
    /// run diverged).
    pub final_point: Vec<f64>,
    /// Objective value at `final_point`.
    pub final_f: f64,
    /// Iterates `theta_t` aligned with `records`, when retained.
    pub iterates: Option<Vec<Vec<f64>>>,
    /// Noise vectors `grad f(theta_t) - g_t` aligned with `records`, when
    /// retained.
    pub noise_vectors: Option<Vec<Vec<f64>>>,
    /// Last finite step index when the run hit a non-finite value; always
    /// equals `records.len()` in that case, since every stored record is
    /// entirely finite.
    pub diverged_at: Option<u64>,
    /// Steps requested of the run (records can be shorter on divergence).
    pub total_steps: u64,
    fingerprint: String,
    rng_word_pos: u128,
}

impl Trajectory {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Loss gap `f(theta_t) - f_star` series aligned with `records`.
    pub fn f_gaps(&self, f_star: f64) -> Vec<f64> {
        self.records.iter().map(|r| r.f_val - f_star).collect()
    }

    /// Replay state for serialization; resuming from it continues the rng
    /// stream exactly where this trajectory stopped.
    pub fn replay_state(&self) -> ReplayState {
        ReplayState {
            fingerprint: self.fingerprint.clone(),
            seed: self.seed,
            next_t: self.records.last().map_or(1, |r| r.t + 1),
            theta: self.final_point.clone(),
            rng_word_pos: self.rng_word_pos,
        }
    }

    /// Builds a trajectory directly from scalar records.
    ///
    /// Intended for diagnostics fixtures and tests. Records must be contiguous
    /// with `t = 1..=len`. The fingerprint hashes the record contents, so two
    /// distinct fixtures do not pass for each other, and resuming a synthetic
    /// trajectory is rejected because no run configuration reproduces it.
    pub fn from_records(records: Vec<StepRecord>, final_f: f64) -> Self {
        for (i, r) in records.iter().enumerate() {
            debug_assert_eq!(r.t, i as u64 + 1, "records must be contiguous from t = 1");
        }
        let mut hasher = Sha256::new();
        hasher.update(b"synthetic|");
        for r in &records {
            hasher.update(r.t.to_le_bytes());
            hasher.update(r.eps.to_bits().to_le_bytes());
            hasher.update(r.f_val.to_bits().to_le_bytes());
            hasher.update(r.grad_norm.to_bits().to_le_bytes());
            hasher.update(r.mart_inc.to_bits().to_le_bytes());
            hasher.update(r.g_norm_sq.to_bits().to_le_bytes());
        }
        hasher.update(final_f.to_bits().to_le_bytes());
        let fingerprint = format!("synthetic-{:x}", hasher.finalize());
        let total_steps = records.len() as u64;
        Trajectory {
            seed: 0,
            initial_point: vec![],
            records,
            final_point: vec![],
            final_f,
            iterates: None,
            noise_vectors: None,
            diverged_at: None,
            total_steps,
            fingerprint,
            rng_word_pos: 0,
        }
    }

    /// Writes the scalar records as CSV with the standard header.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t,eps,f,grad_norm,mart_inc,g_norm_sq")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.t, r.eps, r.f_val, r.grad_norm, r.mart_inc, r.g_norm_sq
            )?;
        }
        Ok(())
    }
}

/// Hash of everything that determines a run's law: schedule, problem, oracle,
/// horizon, and start point. Used to reject resumption under a mismatched
/// configuration.
fn fingerprint(
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    total_steps: u64,
    theta1: &[f64],
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(problem.identity().as_bytes());
    hasher.update(b"|");
    hasher.update(oracle.identity().as_bytes());
    hasher.update(b"|");
    hasher.update(serde_json::to_string(schedule).expect("schedule serializes"));
    hasher.update(b"|");
    hasher.update(total_steps.to_le_bytes());
    for x in theta1 {
        hasher.update(x.to_bits().to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Runs `t_steps` iterations from `theta1` under the trajectory seed.
pub fn run(
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    theta1: &[f64],
    t_steps: u64,
    seed: u64,
    policy: RecordPolicy,
) -> Result<Trajectory, EngineError> {
    if t_steps == 0 {
        return Err(EngineError::EmptyRun);
    }
    let d = problem.dimension();
    if theta1.len() != d {
        return Err(EngineError::DimensionMismatch {
            expected: d,
            got: theta1.len(),
        });
    }
    if let Some(h) = schedule.horizon() {
        if h < t_steps {
            return Err(EngineError::ScheduleTooShort {
                horizon: h,
                requested: t_steps,
            });
        }
    }
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traj = Trajectory {
        seed,
        initial_point: theta1.to_vec(),
        records: Vec::with_capacity(t_steps as usize),
        final_point: theta1.to_vec(),
        final_f: f64::NAN,
        iterates: policy.keep_iterates.then(Vec::new),
        noise_vectors: policy.keep_noise_vectors.then(Vec::new),
        diverged_at: None,
        total_steps: t_steps,
        fingerprint: fingerprint(problem, oracle, schedule, t_steps, theta1),
        rng_word_pos: 0,
    };
    advance(&mut traj, problem, oracle, schedule, 1, t_steps, rng);
    Ok(traj)
}

/// Extends a finished trajectory by `additional` steps.
///
/// The provided components must hash to the trajectory's fingerprint modulo
/// the new horizon; the continuation then reproduces exactly what a longer
/// run would have recorded.
pub fn resume(
    trajectory: &Trajectory,
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    additional: u64,
) -> Result<Trajectory, EngineError> {
    if additional == 0 {
        return Err(EngineError::EmptyRun);
    }
    if let Some(t) = trajectory.diverged_at {
        return Err(EngineError::ResumeAfterDivergence(t));
    }
    let expect = fingerprint(
        problem,
        oracle,
        schedule,
        trajectory.total_steps,
        &trajectory.initial_point,
    );
    if expect != trajectory.fingerprint {
        return Err(EngineError::FingerprintMismatch);
    }
    let new_total = trajectory.total_steps + additional;
    if let Some(h) = schedule.horizon() {
        if h < new_total {
            return Err(EngineError::ScheduleTooShort {
                horizon: h,
                requested: new_total,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trajectory.seed);
    rng.set_word_pos(trajectory.rng_word_pos);
    let mut extended = trajectory.clone();
    extended.total_steps = new_total;
    extended.fingerprint = fingerprint(
        problem,
        oracle,
        schedule,
        new_total,
        &trajectory.initial_point,
    );
    let from = trajectory.total_steps + 1;
    advance(
        &mut extended,
        problem,
        oracle,
        schedule,
        from,
        new_total,
        rng,
    );
    Ok(extended)
}

/// Resumes from a serialized replay state (validating its fingerprint against
/// the provided components and the state's recorded horizon).
pub fn resume_from_state(
    state: &ReplayState,
    trajectory: &Trajectory,
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    additional: u64,
) -> Result<Trajectory, EngineError> {
    if state.fingerprint != trajectory.fingerprint() {
        return Err(EngineError::FingerprintMismatch);
    }
    resume(trajectory, problem, oracle, schedule, additional)
}

/// Core loop shared by `run` and `resume`; executes steps `from..=to`.
fn advance(
    traj: &mut Trajectory,
    problem: &Problem,
    oracle: &GradientOracle,
    schedule: &StepSizeSchedule,
    from: u64,
    to: u64,
    mut rng: ChaCha8Rng,
) {
    let d = problem.dimension();
    let objective = problem.objective();
    let ctx = oracle.prepare(d);
    let mut theta = traj.final_point.clone();
    let mut grad = vec![0.0; d];
    let mut g = vec![0.0; d];

    for t in from..=to {
        let f_val = objective.value(&theta);
        objective.gradient_into(&theta, &mut grad);
        if !f_val.is_finite() || !all_finite(&grad) {
            traj.diverged_at = Some(traj.records.len() as u64);
            break;
        }
        let eps = schedule.step_size(t);
        oracle.sample_with(&ctx, &grad, &mut rng, &mut g);
        let grad_sq = dot(&grad, &grad);
        let mart_inc = eps * (grad_sq - dot(&grad, &g));
        let g_norm_sq = dot(&g, &g);
        if !all_finite(&g) || !mart_inc.is_finite() || !g_norm_sq.is_finite() {
            traj.diverged_at = Some(traj.records.len() as u64);
            break;
        }
        traj.records.push(StepRecord {
            t,
            eps,
            f_val,
            grad_norm: grad_sq.sqrt(),
            mart_inc,
            g_norm_sq,
        });
        if let Some(iterates) = traj.iterates.as_mut() {
            iterates.push(theta.clone());
        }
        if let Some(noise) = traj.noise_vectors.as_mut() {
            noise.push(grad.iter().zip(&g).map(|(a, b)| a - b).collect());
        }
        traj.final_point.copy_from_slice(&theta);
        for (x, gi) in theta.iter_mut().zip(&g) {
            *x -= eps * gi;
        }
        if all_finite(&theta) {
            traj.final_point.copy_from_slice(&theta);
        } else {
            // The update escaped to infinity; keep the last finite iterate.
            traj.diverged_at = Some(traj.records.len() as u64);
            break;
        }
    }
    traj.final_f = objective.value(&traj.final_point);
    traj.rng_word_pos = rng.get_word_pos();
}
