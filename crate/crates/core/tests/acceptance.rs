//! Acceptance gate for the whole workspace: one test per criterion, each
//! printing a single pass/fail line (visible with `--nocapture`).
//!
//! The shared reference ensemble is the ten-dimensional cosine-quadratic
//! landscape under additive Gaussian noise and the slow power schedule
//! `1/t^0.4` certified at `p = 3`, 64 seeds over 2e5 steps. Criteria that
//! need noise vectors use a smaller dedicated run so the reference ensemble
//! never has to retain per-step vectors.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgd_diag::diagnostics::{
    build_ladder, check_recursive_inequality, check_recursive_inequality_scaled, compute_c1_c2,
    compute_c_nu, count_upcrossings, descent_residuals, loss_bound_check, BandRecursionOutcome,
    Interval, StopTime,
};
use sgd_diag::engine::{resume, run, RecordPolicy, StepRecord, Trajectory};
use sgd_diag::ensemble::{
    band_recursion_check, critical_value_match, mean_with_stderr, run_ensemble,
    tail_event_fraction, BandParams, EnsembleOptions, EnsembleOutcome, StartPolicy, TwoPointLaw,
    WindowParams,
};
use sgd_diag::experiment::{
    run_experiment, DiagnosticConfig, ExperimentConfig, IncrementParams, ProblemConfig,
};
use sgd_diag::oracle::{DeclaredBounds, GradientOracle, NoiseModel};
use sgd_diag::problem::Problem;
use sgd_diag::schedule::{StepSizeSchedule, Verdict};

const GOLDEN_SEED: u64 = 17;
const GOLDEN_STEPS: u64 = 200_000;
const GOLDEN_TRAJECTORIES: usize = 64;
const GOLDEN_DIMENSION: usize = 10;
/// Loss band sitting just above the late-run noise floor of the reference
/// ensemble, so excursions keep re-crossing it while the floor drifts down.
const GOLDEN_BAND: BandParams = BandParams {
    a: 3e-4,
    b: 5e-4,
    c: 9e-4,
    m: 1,
};
const INCREMENT_LEVEL: f64 = 0.05;
const UPCROSS_INTERVAL: (f64, f64) = (0.1, 0.15);

fn golden_problem() -> Problem {
    Problem::cos_quadratic(GOLDEN_DIMENSION).unwrap()
}

fn golden_oracle() -> GradientOracle {
    GradientOracle::new(
        NoiseModel::AdditiveGaussian { sigma: 0.1 },
        DeclaredBounds {
            growth: 1.0,
            p: 3.0,
            m0: 8.0,
            m1: 8.0,
            delta: 0.05,
        },
    )
    .unwrap()
}

fn golden_schedule() -> StepSizeSchedule {
    StepSizeSchedule::power_law(0.4, 1.0, 3.0).unwrap()
}

fn golden_options() -> EnsembleOptions {
    EnsembleOptions {
        upcross_intervals: vec![UPCROSS_INTERVAL],
        band: Some(GOLDEN_BAND),
        increment_levels: vec![INCREMENT_LEVEL],
        descent: true,
        ..EnsembleOptions::default()
    }
}

struct Golden {
    problem: Problem,
    oracle: GradientOracle,
    schedule: StepSizeSchedule,
    outcome: EnsembleOutcome,
    build_seconds: f64,
}

static GOLDEN: Lazy<Golden> = Lazy::new(|| {
    let problem = golden_problem();
    let oracle = golden_oracle();
    let schedule = golden_schedule();
    let clock = Instant::now();
    let outcome = run_ensemble(
        &problem,
        &oracle,
        &schedule,
        &StartPolicy::RandomBall { radius: 2.0 },
        GOLDEN_STEPS,
        GOLDEN_TRAJECTORIES,
        GOLDEN_SEED,
        &golden_options(),
        None,
    )
    .unwrap();
    let build_seconds = clock.elapsed().as_secs_f64();
    Golden {
        problem,
        oracle,
        schedule,
        outcome,
        build_seconds,
    }
});

/// Vector-recording companion run for the martingale criteria; smaller so
/// retaining every noise vector stays cheap.
static WINDOW_RUN: Lazy<EnsembleOutcome> = Lazy::new(|| {
    let options = EnsembleOptions {
        record_policy: RecordPolicy {
            keep_iterates: false,
            keep_noise_vectors: true,
        },
        window: Some(WindowParams {
            window: 10.0,
            delta: 0.05,
            times: vec![1_000, 10_000, 100_000],
        }),
        ..EnsembleOptions::default()
    };
    run_ensemble(
        &golden_problem(),
        &golden_oracle(),
        &golden_schedule(),
        &StartPolicy::RandomBall { radius: 2.0 },
        100_000,
        16,
        9_001,
        &options,
        None,
    )
    .unwrap()
});

fn criterion(label: &str, body: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("{label}: pass"),
        Err(payload) => {
            println!("{label}: FAIL");
            resume_unwind(payload);
        }
    }
}

fn fixture_trajectory(gaps: &[f64], eps: &[f64], grads: &[f64], final_f: f64) -> Trajectory {
    let records = gaps
        .iter()
        .zip(eps)
        .zip(grads)
        .enumerate()
        .map(|(i, ((&f_val, &eps), &grad_norm))| StepRecord {
            t: i as u64 + 1,
            eps,
            f_val,
            grad_norm,
            mart_inc: 0.0,
            g_norm_sq: grad_norm * grad_norm,
        })
        .collect();
    Trajectory::from_records(records, final_f)
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[test]
fn ac01_step_size_regime_table() {
    criterion("AC01 step-size regime table", || {
        let clock = Instant::now();
        let expected = [
            (0.2, Verdict::No, Verdict::No),
            (0.3, Verdict::No, Verdict::No),
            (0.4, Verdict::No, Verdict::Yes),
            (0.45, Verdict::No, Verdict::Yes),
            (0.5, Verdict::No, Verdict::Yes),
            (0.6, Verdict::Yes, Verdict::Yes),
            (0.75, Verdict::Yes, Verdict::Yes),
            (1.0, Verdict::Yes, Verdict::Yes),
        ];
        for (q, rm, relaxed) in expected {
            let families = [
                StepSizeSchedule::power_law(q, 1.0, 3.0).unwrap(),
                StepSizeSchedule::log_power_law(q, 1.0, 3.0).unwrap(),
            ];
            for schedule in families {
                let verdicts = schedule.classify();
                assert_eq!(
                    verdicts.robbins_monro,
                    rm,
                    "q = {q}, {:?}",
                    schedule.family()
                );
                assert_eq!(
                    verdicts.relaxed,
                    relaxed,
                    "q = {q}, {:?}",
                    schedule.family()
                );
            }
        }
        assert!(clock.elapsed().as_secs_f64() < 1.0);
    });
}

#[test]
fn ac02_gradient_norm_trend() {
    criterion("AC02 gradient-norm trend", || {
        let golden = &GOLDEN;
        assert!(golden.outcome.failures.is_empty());
        assert_eq!(golden.outcome.stats.diverged_count, 0);
        assert!(
            golden.build_seconds < 300.0,
            "reference ensemble took {:.1} s",
            golden.build_seconds
        );
        let stats = &golden.outcome.stats;
        let last = stats.mean_grad_sq.last().unwrap();
        assert!(last.mean < 1e-2, "final mean grad_sq = {:.3e}", last.mean);
        let k = stats.checkpoints.len();
        assert!(k >= 3);
        let xs: Vec<f64> = stats.checkpoints[k - 3..]
            .iter()
            .map(|&t| (t as f64).ln())
            .collect();
        let ys: Vec<f64> = stats.mean_grad_sq[k - 3..]
            .iter()
            .map(|m| m.mean.ln())
            .collect();
        let x_bar = xs.iter().sum::<f64>() / 3.0;
        let y_bar = ys.iter().sum::<f64>() / 3.0;
        let cov = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - x_bar) * (y - y_bar))
            .sum::<f64>();
        let var = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum::<f64>();
        let slope = cov / var;
        assert!(slope < 0.0, "log-log slope = {slope:.3}");
    });
}

#[test]
fn ac03_convergence_proxies() {
    criterion("AC03 convergence proxies", || {
        let golden = &GOLDEN;
        let fraction = golden.outcome.stats.as_converged_fraction;
        assert!(fraction >= 0.95, "tail-sup proxy fraction = {fraction}");
        let matched = critical_value_match(&golden.outcome.summaries, &golden.problem, 1e-2);
        let matched = matched.fraction.expect("certificate lists critical values");
        assert!(matched >= 0.95, "critical-value match fraction = {matched}");
    });
}

#[test]
fn ac04_upcrossing_saturation() {
    criterion("AC04 up-crossing saturation", || {
        let stats = &GOLDEN.outcome.stats;
        let sat = &stats.upcross_saturation[0];
        assert_eq!((sat.left, sat.right), UPCROSS_INTERVAL);
        assert!(sat.mean_full >= sat.mean_half);
        assert!(
            sat.saturated_fraction >= 0.90,
            "saturated fraction = {}",
            sat.saturated_fraction
        );
    });
}

#[test]
fn ac05_descent_residuals() {
    criterion("AC05 descent residuals", || {
        for summary in &GOLDEN.outcome.summaries {
            let check = summary.descent.as_ref().expect("descent enabled");
            assert_eq!(check.violations, 0, "seed {}", summary.seed);
            assert!(
                check.max_normalized <= 1e-9,
                "seed {}: normalized residual {:.3e}",
                summary.seed,
                check.max_normalized
            );
        }

        // Exact case: isotropic curvature equals the smoothness constant, no
        // noise, step at or below 1/L, so the quadratic expansion is the
        // objective and residuals vanish to rounding.
        let problem = Problem::quadratic(vec![2.0; 4], 1.0).unwrap();
        let oracle = GradientOracle::new(
            NoiseModel::AdditiveGaussian { sigma: 0.0 },
            DeclaredBounds {
                growth: 1.0,
                p: 3.0,
                m0: 1.0,
                m1: 1.0,
                delta: 0.05,
            },
        )
        .unwrap();
        let start = [1.5, -0.75, 2.0, -1.25];
        for eps in [0.5, 0.4] {
            let schedule = StepSizeSchedule::constant(eps, 3.0).unwrap();
            let traj = run(
                &problem,
                &oracle,
                &schedule,
                &start,
                1_000,
                3,
                RecordPolicy {
                    keep_iterates: true,
                    keep_noise_vectors: false,
                },
            )
            .unwrap();
            let check = descent_residuals(&traj, &problem);
            assert_eq!(check.violations, 0);
            assert!(check.max_residual.abs() <= 1e-12);

            // Two-sided: the residual is zero, not merely nonpositive.
            let lipschitz = problem.lipschitz();
            let iterates = traj.iterates.as_ref().unwrap();
            for (i, record) in traj.records.iter().enumerate() {
                let here = &iterates[i];
                let next = if i + 1 < iterates.len() {
                    &iterates[i + 1]
                } else {
                    &traj.final_point
                };
                let f_next = if i + 1 < traj.records.len() {
                    traj.records[i + 1].f_val
                } else {
                    traj.final_f
                };
                let grad = problem.gradient(here).unwrap();
                let mut inner = 0.0;
                let mut step_sq = 0.0;
                for ((&a, &b), g) in next.iter().zip(here).zip(&grad) {
                    inner += g * (a - b);
                    step_sq += (a - b) * (a - b);
                }
                let residual = f_next - record.f_val - inner - 0.5 * lipschitz * step_sq;
                assert!(
                    residual.abs() <= 1e-12 * (1.0 + record.f_val.abs()),
                    "t = {}: residual {residual:.3e}",
                    record.t
                );
            }
        }
    });
}

#[test]
fn ac06_gradient_loss_gap_bound() {
    criterion("AC06 gradient versus loss-gap bound", || {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        for id in [
            "quadratic",
            "high_cond_quadratic",
            "cos_quadratic",
            "non_coercive_demo",
        ] {
            let problem = Problem::from_id(id, 10).unwrap();
            let points: Vec<Vec<f64>> = (0..10_000)
                .map(|_| (0..10).map(|_| rng.gen_range(-10.0..=10.0)).collect())
                .collect();
            let check = loss_bound_check(&problem, &points).unwrap();
            assert!(
                check.pass && check.max_relative <= 1e-9,
                "{id}: relative violation {:.3e}",
                check.max_relative
            );
            if id == "quadratic" {
                // Isotropic case is an identity, not just a bound.
                let lipschitz = problem.lipschitz();
                for point in &points {
                    let f = problem.value(point).unwrap();
                    let grad = problem.gradient(point).unwrap();
                    let grad_sq = grad.iter().map(|g| g * g).sum::<f64>();
                    let slack = grad_sq - 2.0 * lipschitz * (f - problem.f_star());
                    assert!(slack.abs() <= 1e-12 * grad_sq.max(1.0));
                }
            }
        }
    });
}

/// Independent recount: maximize the number of index-disjoint pairs
/// `(t1, t2)` with `v[t1] < e`, `v[t2] >= o`, and everything strictly
/// between inside `[e, o)`. For a fixed `t1` at most one `t2` qualifies, so
/// the scan below enumerates every admissible pair.
fn exhaustive_upcrossings(values: &[f64], e: f64, o: f64) -> u64 {
    let n = values.len();
    let mut best = vec![0u64; n + 1];
    for s in (0..n).rev() {
        best[s] = best[s + 1];
        if values[s] < e {
            for (j, &v) in values.iter().enumerate().skip(s + 1) {
                if v >= o {
                    best[s] = best[s].max(1 + best[j + 1]);
                    break;
                }
                if v < e {
                    break;
                }
            }
        }
    }
    best[0]
}

#[test]
fn ac07_upcrossing_count_oracle() {
    criterion("AC07 up-crossing count oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        for case in 0..1_000u64 {
            let len = rng.gen_range(0..=1_000);
            let quantized = case % 2 == 0;
            let values: Vec<f64> = (0..len)
                .map(|_| {
                    if quantized {
                        rng.gen_range(0..=20) as f64 / 20.0
                    } else {
                        rng.gen::<f64>()
                    }
                })
                .collect();
            let left = if quantized {
                rng.gen_range(0..=18) as f64 / 20.0
            } else {
                rng.gen_range(0.0..0.9)
            };
            let right = if case % 7 == 0 {
                f64::INFINITY
            } else if quantized {
                left + rng.gen_range(1..=10) as f64 / 20.0
            } else {
                left + rng.gen_range(1e-6..0.5)
            };
            let interval = Interval::new(left, right).unwrap();
            assert_eq!(
                count_upcrossings(&values, interval),
                exhaustive_upcrossings(&values, left, right),
                "case {case}: interval ({left}, {right})"
            );
        }
    });
}

#[test]
fn ac08_stopping_ladder_unit_cases() {
    criterion("AC08 stopping-ladder unit cases", || {
        let eps = [1.0, 0.5, 0.25, 0.125];

        let hand = fixture_trajectory(&[0.5, 1.2, 2.5, 0.3], &eps, &[1.0; 4], 0.3);
        let ladder = build_ladder(&hand, 0.0, 1.0, 2.0, 4).unwrap();
        assert_eq!(
            ladder.triples(),
            &[[
                StopTime::Finite(2),
                StopTime::Finite(3),
                StopTime::Finite(4)
            ]]
        );
        assert_eq!(ladder.truncated_times(), vec![2, 3, 4]);

        let below = fixture_trajectory(&[0.5, 0.2, 0.9], &eps[..3], &[1.0; 3], 0.9);
        let ladder = build_ladder(&below, 0.0, 1.0, 2.0, 3).unwrap();
        assert!(ladder.is_empty());

        // With an infinite upper threshold the middle phase can only fire by
        // falling back below the lower one.
        let spike = fixture_trajectory(&[0.5, 1.5, 1.5, 0.3], &eps, &[1.0; 4], 0.3);
        let ladder = build_ladder(&spike, 0.0, 1.0, f64::INFINITY, 4).unwrap();
        assert_eq!(
            ladder.triples(),
            &[[
                StopTime::Finite(2),
                StopTime::Finite(4),
                StopTime::Finite(4)
            ]]
        );
    });
}

#[test]
fn ac09_band_recursion_constants_and_check() {
    criterion("AC09 band recursion constants and check", || {
        let golden = &GOLDEN;
        let (c1, _) = compute_c1_c2(1.0, 2.0, 1, 1.0, 1.0, 0.5, &golden.schedule, 1.0).unwrap();
        assert_eq!(c1, 500.0);

        let declared = golden.oracle.declared();
        let check = band_recursion_check(
            &golden.outcome.summaries,
            &GOLDEN_BAND,
            &golden.problem,
            declared.growth,
            declared.p,
            declared.m0,
            &golden.schedule,
            1.0,
        )
        .unwrap();
        println!(
            "  reference band: lhs {:.3e} (hw {:.1e}), rhs {:.3e}, delta_hat {:?}",
            check.lhs, check.lhs_halfwidth, check.rhs, check.delta_hat
        );
        assert!(check.delta_hat.unwrap() > 0.0);
        assert!(check.lhs > 0.0, "band never visited");
        assert_eq!(check.outcome, BandRecursionOutcome::Passed);

        // Sensitivity control: a synthetic ensemble calibrated so the honest
        // constant passes with little room and the halved constant fails.
        let schedule = StepSizeSchedule::power_law(0.4, 0.01, 3.0).unwrap();
        let eps: Vec<f64> = (1..=6).map(|t| schedule.step_size(t)).collect();
        let gaps = [0.5, 1.5, 1.6, 2.5, 4.5, 0.2];
        let grads = [3.0, 2.0, 2.0, 2.0, 3.0, 3.0];
        let control: Vec<Trajectory> = (0..8)
            .map(|_| fixture_trajectory(&gaps, &eps, &grads, 0.2))
            .collect();
        let problem = Problem::quadratic(vec![1.0], 1.0).unwrap();
        let honest = check_recursive_inequality(
            &control, 1.0, 2.0, 4.0, 1, &problem, 1.0, 3.0, 1.0, &schedule,
        )
        .unwrap();
        assert_eq!(honest.outcome, BandRecursionOutcome::Passed);
        let halved = check_recursive_inequality_scaled(
            &control, 1.0, 2.0, 4.0, 1, &problem, 1.0, 3.0, 1.0, &schedule, 0.5,
        )
        .unwrap();
        assert_eq!(halved.outcome, BandRecursionOutcome::Failed);
        assert!(halved.lhs > halved.rhs);
    });
}

#[test]
fn ac10_truncated_increment_bound() {
    criterion("AC10 truncated increment bound", || {
        let golden = &GOLDEN;
        let sums: Vec<f64> = golden
            .outcome
            .summaries
            .iter()
            .filter(|s| s.diverged_at.is_none())
            .map(|s| s.increment_sums[0])
            .collect();
        assert_eq!(sums.len(), GOLDEN_TRAJECTORIES);
        let estimate = mean_with_stderr(&sums);
        let declared = golden.oracle.declared();
        let bound = compute_c_nu(
            INCREMENT_LEVEL,
            golden.problem.certificate().d_eta,
            golden.problem.lipschitz(),
            declared.p,
            declared.m0,
            &golden.schedule,
        )
        .unwrap();
        assert!(estimate.mean >= 0.0);
        assert!(
            estimate.mean <= bound + 2.0 * estimate.stderr,
            "mean {:.3e} exceeds bound {:.3e}",
            estimate.mean,
            bound
        );
    });
}

#[test]
fn ac11_martingale_mean_and_window_sups() {
    criterion("AC11 martingale mean and window sups", || {
        let outcome = &*WINDOW_RUN;
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.stats.diverged_count, 0);
        for (t, estimate) in outcome
            .stats
            .checkpoints
            .iter()
            .zip(&outcome.stats.mean_mart_inc)
        {
            assert!(estimate.stderr > 0.0);
            assert!(
                estimate.mean.abs() <= 4.0 * estimate.stderr,
                "checkpoint {t}: mean {:.3e}, stderr {:.3e}",
                estimate.mean,
                estimate.stderr
            );
        }

        let mut medians = Vec::new();
        for i in 0..3 {
            let mut sups: Vec<f64> = outcome
                .summaries
                .iter()
                .map(|s| s.window_sups.as_ref().expect("window enabled")[i])
                .collect();
            medians.push(median(&mut sups));
        }
        println!("  window sup medians: {medians:?}");
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "medians not strictly decreasing: {medians:?}"
        );
    });
}

#[test]
fn ac12_two_point_counterexample() {
    criterion("AC12 two-point counterexample", || {
        let clock = Instant::now();
        for atom in 1..=1_000_000u64 {
            let law = TwoPointLaw::new(atom).unwrap();
            assert_eq!(law.second_moment_exact(), 1.0, "atom {atom}");
        }
        let estimate = tail_event_fraction(100_000, 100_000, 100, 1_212).unwrap();
        assert!(estimate.stderr > 0.0);
        assert!(
            (estimate.fraction - estimate.tail_sum).abs() <= 3.0 * estimate.stderr,
            "fraction {:.5e} vs tail sum {:.5e} (stderr {:.2e})",
            estimate.fraction,
            estimate.tail_sum,
            estimate.stderr
        );
        assert!(clock.elapsed().as_secs_f64() < 30.0);
    });
}

#[test]
fn ac13_determinism_and_resume() {
    criterion("AC13 determinism and resume", || {
        let golden = &GOLDEN;
        let config = ExperimentConfig {
            problem: ProblemConfig {
                id: "cos_quadratic".into(),
                dimension: GOLDEN_DIMENSION,
            },
            oracle: golden.oracle.clone(),
            schedule: golden.schedule.clone(),
            start: StartPolicy::RandomBall { radius: 2.0 },
            steps: GOLDEN_STEPS,
            trajectories: GOLDEN_TRAJECTORIES,
            base_seed: GOLDEN_SEED,
            record_policy: RecordPolicy::default(),
            write_trajectories: false,
            require_relaxed: true,
            as_tolerance: 0.1,
            critical_tolerance: 1e-2,
            upcross_intervals: vec![UPCROSS_INTERVAL],
            diagnostics: vec![
                DiagnosticConfig::DescentResiduals,
                DiagnosticConfig::TruncatedIncrement(IncrementParams {
                    nu: INCREMENT_LEVEL,
                }),
                DiagnosticConfig::BandRecursion(GOLDEN_BAND),
            ],
            max_diverged_fraction: 0.0,
            output_dir: None,
        };
        let first = tempfile::tempdir().unwrap();
        let second = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&config, first.path()).unwrap();
        assert!(outcome.success());
        run_experiment(&config, second.path()).unwrap();
        for name in ["checkpoints.csv", "ensemble.json", "diagnostics.json"] {
            assert_eq!(
                std::fs::read(first.path().join(name)).unwrap(),
                std::fs::read(second.path().join(name)).unwrap(),
                "artifact {name} differs between reruns"
            );
        }

        let theta1 = StartPolicy::RandomBall { radius: 2.0 }.sample(GOLDEN_DIMENSION, GOLDEN_SEED);
        let policy = RecordPolicy::default();
        let full = run(
            &golden.problem,
            &golden.oracle,
            &golden.schedule,
            &theta1,
            GOLDEN_STEPS,
            GOLDEN_SEED,
            policy,
        )
        .unwrap();
        let half = run(
            &golden.problem,
            &golden.oracle,
            &golden.schedule,
            &theta1,
            GOLDEN_STEPS / 2,
            GOLDEN_SEED,
            policy,
        )
        .unwrap();
        let resumed = resume(
            &half,
            &golden.problem,
            &golden.oracle,
            &golden.schedule,
            GOLDEN_STEPS / 2,
        )
        .unwrap();
        assert_eq!(resumed.records.len(), full.records.len());
        assert_eq!(resumed.records, full.records);
        assert_eq!(resumed.final_point, full.final_point);
        assert_eq!(resumed.fingerprint(), full.fingerprint());
    });
}
