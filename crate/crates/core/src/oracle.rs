//! Stochastic gradient oracles and their declared moment bounds.
//!
//! An oracle wraps a noise model around the true gradient and declares the
//! constants the convergence theory consumes: a weak-growth factor for the
//! second moment, an exponent `p > 2`, conditional moment bounds `m0` (order
//! `p` on the low-loss sublevel) and `m1` (order `2p - 2` near critical
//! values), and the half-width `delta` of the critical band. Declarations are
//! audited empirically by the `check_*` functions; models with closed-form
//! second moments are also validated analytically against the declared
//! growth factor.
//!
//! Every production model is conditionally unbiased by construction. The
//! heavy-tailed model is symmetrized so it stays centered, and construction
//! rejects tail indices at or below 2. A deliberately biased model exists as
//! a negative control for the unbiasedness check and nothing else.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::Problem;
use crate::util::{l2_norm, l2_norm_sq};

/// Errors from oracle construction and use.
#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle parameter {name} must be {requirement}, got {value}")]
    BadParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error(
        "finite-sum batch must satisfy 1 <= batch <= components, got batch {batch} of {components}"
    )]
    BadBatch { batch: usize, components: usize },
    #[error("declared growth factor {declared} is below the analytic requirement {required} in dimension {dim}")]
    GrowthTooSmall {
        declared: f64,
        required: f64,
        dim: usize,
    },
    #[error("dimension mismatch: gradient has {expected} entries, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown oracle id '{0}'")]
    UnknownId(String),
    #[error("missing oracle field '{0}'")]
    MissingField(&'static str),
}

/// How noise is layered on the true gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// `g = grad + sigma * Z`, `Z` standard normal per coordinate.
    AdditiveGaussian { sigma: f64 },
    /// `g = grad + scale * T`, `T` Student-t per coordinate; `dof > 2` keeps
    /// the variance finite.
    AdditiveStudentT { dof: f64, scale: f64 },
    /// `g = (1 + sigma * z) * grad + sigma * Z` with scalar `z` and vector
    /// `Z`, both standard normal.
    MultiplicativeGaussian { sigma: f64 },
    /// `g = grad + scale-Pareto noise with random sign` per coordinate;
    /// symmetric, hence centered, with tail index `alpha`. Moments of order
    /// `>= alpha` do not exist.
    ParetoAdditive { alpha: f64, scale: f64 },
    /// Synthetic finite sum: `components` gradients `grad + c_i` whose shifts
    /// sum to zero exactly; a step averages `batch` of them drawn uniformly
    /// with replacement. The full batch reproduces the exact gradient.
    FiniteSum {
        components: usize,
        batch: usize,
        spread: f64,
    },
    /// Negative control: `g = grad + bias * 1 + sigma * Z`. Deliberately
    /// violates unbiasedness so checker sensitivity can be tested.
    BiasedGaussian { bias: f64, sigma: f64 },
}

/// Moment bounds an oracle declares about itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredBounds {
    /// Weak-growth factor: second moment at most `growth * (grad_sq + 1)`.
    pub growth: f64,
    /// Exponent `p > 2` of the declared higher moments.
    pub p: f64,
    /// Order-`p` conditional moment bound on the low-loss sublevel.
    pub m0: f64,
    /// Order-`2p - 2` conditional moment bound inside the critical band.
    pub m1: f64,
    /// Half-width of the critical band the `m1` bound refers to.
    pub delta: f64,
}

/// A noise model plus its declared bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OracleRepr", into = "OracleRepr")]
pub struct GradientOracle {
    noise: NoiseModel,
    declared: DeclaredBounds,
}

/// Fixed seed for the finite-sum component shifts, so the same config always
/// denotes the same synthetic sum regardless of trajectory seeds.
const COMPONENT_SEED: u64 = 0x5f3c_9a2e_71b4_d806;

/// Per-dimension data some models precompute once per run.
#[derive(Debug, Clone)]
pub struct OracleContext {
    components: Option<Vec<Vec<f64>>>,
}

impl GradientOracle {
    pub fn new(noise: NoiseModel, declared: DeclaredBounds) -> Result<Self, OracleError> {
        let positive = |name: &'static str, v: f64| -> Result<(), OracleError> {
            if !(v.is_finite() && v > 0.0) {
                return Err(OracleError::BadParameter {
                    name,
                    requirement: "positive and finite",
                    value: v,
                });
            }
            Ok(())
        };
        let nonnegative = |name: &'static str, v: f64| -> Result<(), OracleError> {
            if !(v.is_finite() && v >= 0.0) {
                return Err(OracleError::BadParameter {
                    name,
                    requirement: "nonnegative and finite",
                    value: v,
                });
            }
            Ok(())
        };
        match &noise {
            NoiseModel::AdditiveGaussian { sigma } => nonnegative("sigma", *sigma)?,
            NoiseModel::AdditiveStudentT { dof, scale } => {
                positive("scale", *scale)?;
                if !(dof.is_finite() && *dof > 2.0) {
                    return Err(OracleError::BadParameter {
                        name: "dof",
                        requirement: "greater than 2 for a finite variance",
                        value: *dof,
                    });
                }
            }
            NoiseModel::MultiplicativeGaussian { sigma } => nonnegative("sigma", *sigma)?,
            NoiseModel::ParetoAdditive { alpha, scale } => {
                positive("scale", *scale)?;
                if !(alpha.is_finite() && *alpha > 2.0) {
                    return Err(OracleError::BadParameter {
                        name: "alpha",
                        requirement: "greater than 2: heavier tails cannot stay centered with finite variance",
                        value: *alpha,
                    });
                }
            }
            NoiseModel::FiniteSum {
                components,
                batch,
                spread,
            } => {
                nonnegative("spread", *spread)?;
                if *batch == 0 || batch > components {
                    return Err(OracleError::BadBatch {
                        batch: *batch,
                        components: *components,
                    });
                }
            }
            NoiseModel::BiasedGaussian { sigma, bias } => {
                nonnegative("sigma", *sigma)?;
                if !bias.is_finite() {
                    return Err(OracleError::BadParameter {
                        name: "bias",
                        requirement: "finite",
                        value: *bias,
                    });
                }
            }
        }
        positive("G", declared.growth)?;
        positive("M0", declared.m0)?;
        positive("M1", declared.m1)?;
        positive("delta", declared.delta)?;
        if !(declared.p.is_finite() && declared.p > 2.0) {
            return Err(OracleError::BadParameter {
                name: "p",
                requirement: "greater than 2",
                value: declared.p,
            });
        }
        Ok(Self { noise, declared })
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn declared(&self) -> DeclaredBounds {
        self.declared
    }

    /// Declared bound on the order-`p` conditional moment, `m0^p`.
    pub fn sublevel_moment_bound(&self) -> f64 {
        self.declared.m0.powf(self.declared.p)
    }

    /// Declared bound on the order-`2p - 2` conditional moment, `m1^(2p-2)`.
    pub fn band_moment_bound(&self) -> f64 {
        self.declared.m1.powf(2.0 * self.declared.p - 2.0)
    }

    /// Smallest growth factor compatible with the model's analytic second
    /// moment in dimension `d`, where a closed form exists.
    ///
    /// For additive noise with per-coordinate variance `v` the second moment
    /// is `grad_sq + v d <= max(1, v d) (grad_sq + 1)`; the multiplicative
    /// model adds a `(1 + sigma^2)` factor on `grad_sq`.
    pub fn analytic_growth_requirement(&self, d: usize) -> Option<f64> {
        let d = d as f64;
        match &self.noise {
            NoiseModel::AdditiveGaussian { sigma } => Some(1f64.max(sigma * sigma * d)),
            NoiseModel::AdditiveStudentT { dof, scale } => {
                let v = scale * scale * dof / (dof - 2.0);
                Some(1f64.max(v * d))
            }
            NoiseModel::MultiplicativeGaussian { sigma } => {
                Some((1.0 + sigma * sigma).max(sigma * sigma * d))
            }
            NoiseModel::ParetoAdditive { alpha, scale } => {
                let v = alpha * scale * scale / (alpha - 2.0);
                Some(1f64.max(v * d))
            }
            NoiseModel::FiniteSum { batch, .. } => {
                let ctx = self.prepare(d as usize);
                let comps = ctx.components.as_ref().expect("finite sum has components");
                let mean_sq = comps.iter().map(|c| l2_norm_sq(c)).sum::<f64>() / comps.len() as f64;
                if *batch == comps.len() {
                    Some(1.0)
                } else {
                    Some(1f64.max(mean_sq / *batch as f64))
                }
            }
            NoiseModel::BiasedGaussian { .. } => None,
        }
    }

    /// Verifies the declared growth factor against the analytic requirement
    /// in dimension `d`, where one exists.
    pub fn validate_growth(&self, d: usize) -> Result<(), OracleError> {
        if let Some(required) = self.analytic_growth_requirement(d) {
            if self.declared.growth < required * (1.0 - 1e-9) {
                return Err(OracleError::GrowthTooSmall {
                    declared: self.declared.growth,
                    required,
                    dim: d,
                });
            }
        }
        Ok(())
    }

    /// Precomputes per-dimension state (the finite-sum component shifts).
    ///
    /// Shifts are drawn from a fixed internal stream and the last one is set
    /// to the negated sum of the others, so they cancel exactly and the
    /// uniform pick over components is centered on the true gradient.
    pub fn prepare(&self, d: usize) -> OracleContext {
        let components = match &self.noise {
            NoiseModel::FiniteSum {
                components, spread, ..
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(COMPONENT_SEED);
                let mut shifts: Vec<Vec<f64>> = (0..components.saturating_sub(1))
                    .map(|_| (0..d).map(|_| rng.gen_range(-*spread..=*spread)).collect())
                    .collect();
                let mut last = vec![0.0; d];
                for shift in &shifts {
                    for (acc, s) in last.iter_mut().zip(shift) {
                        *acc += s;
                    }
                }
                for v in &mut last {
                    *v = -*v;
                }
                shifts.push(last);
                Some(shifts)
            }
            _ => None,
        };
        OracleContext { components }
    }

    /// Draws a stochastic gradient given the true gradient at the point.
    ///
    /// The number of rng draws per call is model-dependent but the stream
    /// order is fixed, so trajectories are replayable from seed and stream
    /// position alone.
    pub fn sample_with<R: Rng>(
        &self,
        ctx: &OracleContext,
        grad: &[f64],
        rng: &mut R,
        out: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), out.len());
        match &self.noise {
            NoiseModel::AdditiveGaussian { sigma } => {
                for (o, g) in out.iter_mut().zip(grad) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = g + sigma * z;
                }
            }
            NoiseModel::AdditiveStudentT { dof, scale } => {
                let t = StudentT::new(*dof).expect("dof validated at construction");
                for (o, g) in out.iter_mut().zip(grad) {
                    *o = g + scale * t.sample(rng);
                }
            }
            NoiseModel::MultiplicativeGaussian { sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                let factor = 1.0 + sigma * z;
                for (o, g) in out.iter_mut().zip(grad) {
                    let zi: f64 = rng.sample(StandardNormal);
                    *o = factor * g + sigma * zi;
                }
            }
            NoiseModel::ParetoAdditive { alpha, scale } => {
                let pareto = Pareto::new(*scale, *alpha).expect("validated at construction");
                for (o, g) in out.iter_mut().zip(grad) {
                    let magnitude: f64 = pareto.sample(rng);
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    *o = g + sign * magnitude;
                }
            }
            NoiseModel::FiniteSum {
                components, batch, ..
            } => {
                let shifts = ctx.components.as_ref().expect("prepared for finite sum");
                out.copy_from_slice(grad);
                if batch == components {
                    return; // full batch: exact gradient, no draws
                }
                let weight = 1.0 / *batch as f64;
                for _ in 0..*batch {
                    let pick = rng.gen_range(0..*components);
                    for (o, c) in out.iter_mut().zip(&shifts[pick]) {
                        *o += weight * c;
                    }
                }
            }
            NoiseModel::BiasedGaussian { bias, sigma } => {
                for (o, g) in out.iter_mut().zip(grad) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = g + bias + sigma * z;
                }
            }
        }
    }

    /// One-off sampling convenience: computes the gradient, prepares context,
    /// and draws a stochastic gradient at `theta`.
    pub fn sample<R: Rng>(
        &self,
        problem: &Problem,
        theta: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>, OracleError> {
        if theta.len() != problem.dimension() {
            return Err(OracleError::DimensionMismatch {
                expected: problem.dimension(),
                got: theta.len(),
            });
        }
        let grad = problem.gradient(theta).expect("dimension checked");
        let ctx = self.prepare(theta.len());
        let mut out = vec![0.0; theta.len()];
        self.sample_with(&ctx, &grad, rng, &mut out);
        Ok(out)
    }

    /// Stable identity string used in replay fingerprints.
    pub fn identity(&self) -> String {
        serde_json::to_string(self).expect("oracle serializes")
    }
}

/// Result of the conditional-mean audit at a fixed point.
#[derive(Debug, Clone)]
pub struct UnbiasedCheck {
    /// One studentized deviation per coordinate.
    pub z_scores: Vec<f64>,
    pub n_draws: usize,
    pub pass: bool,
}

/// Audits `E[g | theta] = grad f(theta)` by drawing `n` samples and
/// studentizing the per-coordinate deviation from the true gradient. A zero
/// sample variance with zero deviation (noiseless models) scores z = 0.
pub fn check_unbiased(
    oracle: &GradientOracle,
    problem: &Problem,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<UnbiasedCheck, OracleError> {
    if theta.len() != problem.dimension() {
        return Err(OracleError::DimensionMismatch {
            expected: problem.dimension(),
            got: theta.len(),
        });
    }
    let d = theta.len();
    let grad = problem.gradient(theta).expect("dimension checked");
    let ctx = oracle.prepare(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut g = vec![0.0; d];
    for _ in 0..n {
        oracle.sample_with(&ctx, &grad, &mut rng, &mut g);
        for i in 0..d {
            let dev = g[i] - grad[i];
            sum[i] += dev;
            sum_sq[i] += dev * dev;
        }
    }
    let nf = n as f64;
    let z_scores: Vec<f64> = (0..d)
        .map(|i| {
            let mean = sum[i] / nf;
            let var = (sum_sq[i] - nf * mean * mean) / (nf - 1.0);
            let se = (var.max(0.0) / nf).sqrt();
            if se == 0.0 {
                if mean == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                mean / se
            }
        })
        .collect();
    let pass = z_scores.iter().all(|z| z.abs() <= 4.0);
    Ok(UnbiasedCheck {
        z_scores,
        n_draws: n,
        pass,
    })
}

/// Result of the weak-growth audit over a set of points.
#[derive(Debug, Clone)]
pub struct WeakGrowthCheck {
    /// Largest observed `E[g_sq] / (grad_sq + 1)` across the points.
    pub observed: f64,
    pub declared: f64,
    pub pass: bool,
}

/// Estimates the weak-growth factor empirically: at each point the mean of
/// `norm(g)^2` over `n` draws is divided by `grad_sq + 1`, and the maximum
/// ratio must stay within 10% of the declared factor.
pub fn check_weak_growth(
    oracle: &GradientOracle,
    problem: &Problem,
    points: &[Vec<f64>],
    n: usize,
    seed: u64,
) -> Result<WeakGrowthCheck, OracleError> {
    let d = problem.dimension();
    let ctx = oracle.prepare(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed: f64 = 0.0;
    let mut g = vec![0.0; d];
    for theta in points {
        if theta.len() != d {
            return Err(OracleError::DimensionMismatch {
                expected: d,
                got: theta.len(),
            });
        }
        let grad = problem.gradient(theta).expect("dimension checked");
        let mut acc = 0.0;
        for _ in 0..n {
            oracle.sample_with(&ctx, &grad, &mut rng, &mut g);
            acc += l2_norm_sq(&g);
        }
        let ratio = (acc / n as f64) / (l2_norm_sq(&grad) + 1.0);
        observed = observed.max(ratio);
    }
    let declared = oracle.declared().growth;
    Ok(WeakGrowthCheck {
        observed,
        declared,
        pass: observed <= 1.1 * declared,
    })
}

/// Where a conditional moment is probed.
#[derive(Debug, Clone, Copy)]
pub enum MomentRegion {
    /// Points with `f - f_star < gap`.
    SublevelGap { gap: f64 },
    /// Points within `delta` of a certified critical value.
    CriticalBand { delta: f64 },
}

/// Result of the conditional-moment audit.
#[derive(Debug, Clone)]
pub struct LocalMomentCheck {
    /// Largest per-point estimate of `E[norm(g)^order]` at the base sample
    /// size.
    pub max_estimate: f64,
    /// Declared bound the estimate is compared against.
    pub bound: f64,
    /// Estimates at the staged sample sizes used for divergence detection.
    pub stages: Vec<f64>,
    /// Share of the order-moment sum contributed by the single largest draw
    /// at the last stage.
    pub max_share: f64,
    /// True when the staged estimates never stabilize or one draw dominates,
    /// the signature of an infinite moment.
    pub diverging: bool,
    /// True when the sampler found no region points; reported, not thrown.
    pub region_empty: bool,
    pub pass: bool,
}

/// Estimates the conditional moment `E[norm(g)^order | theta]` over sampled
/// region points and compares the worst case against `bound`.
///
/// Divergence is detected two ways, both reported: staged estimates at
/// 10^4, 10^5, and 10^6 draws that keep growing by 50% or more, and a single
/// draw contributing more than 5% of the final stage's moment sum. Either
/// signature fails the check regardless of the numeric estimate, since a
/// heavy tail makes any finite estimate meaningless.
pub fn check_local_moments(
    oracle: &GradientOracle,
    problem: &Problem,
    region: MomentRegion,
    order: f64,
    bound: f64,
    n_points: usize,
    seed: u64,
) -> LocalMomentCheck {
    let d = problem.dimension();
    let ctx = oracle.prepare(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_star = problem.f_star();
    let in_region = |theta: &[f64]| -> bool {
        let f = problem.objective().value(theta);
        match region {
            MomentRegion::SublevelGap { gap } => f - f_star < gap,
            MomentRegion::CriticalBand { delta } => problem.in_critical_band(f, delta),
        }
    };

    // Rejection-sample region points from balls of doubling radius.
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut radius = 1.0;
    while points.len() < n_points && radius <= 1024.0 {
        for _ in 0..200 {
            let cand = crate::sampling::sample_ball(d, radius, &mut rng);
            if in_region(&cand) {
                points.push(cand);
                if points.len() >= n_points {
                    break;
                }
            }
        }
        radius *= 2.0;
    }
    if points.is_empty() {
        return LocalMomentCheck {
            max_estimate: f64::NAN,
            bound,
            stages: vec![],
            max_share: f64::NAN,
            diverging: false,
            region_empty: true,
            pass: false,
        };
    }

    let base_draws = 10_000;
    let mut g = vec![0.0; d];
    let mut max_estimate: f64 = 0.0;
    let mut worst_point = 0;
    for (idx, theta) in points.iter().enumerate() {
        let grad = problem.gradient(theta).expect("sampled in dimension");
        let mut acc = 0.0;
        for _ in 0..base_draws {
            oracle.sample_with(&ctx, &grad, &mut rng, &mut g);
            acc += l2_norm(&g).powf(order);
        }
        let est = acc / base_draws as f64;
        if est > max_estimate {
            max_estimate = est;
            worst_point = idx;
        }
    }

    // Staged growth probe at the worst point.
    let grad = problem
        .gradient(&points[worst_point])
        .expect("sampled in dimension");
    let mut stages = Vec::new();
    let mut seen = 0usize;
    let mut acc = 0.0;
    let mut top: f64 = 0.0;
    for target in [10_000usize, 100_000, 1_000_000] {
        while seen < target {
            oracle.sample_with(&ctx, &grad, &mut rng, &mut g);
            let term = l2_norm(&g).powf(order);
            acc += term;
            top = top.max(term);
            seen += 1;
        }
        stages.push(acc / seen as f64);
    }
    let max_share = top / acc;
    let growing = stages.windows(2).all(|w| w[1] >= 1.5 * w[0]);
    let diverging = growing || max_share > 0.05;

    LocalMomentCheck {
        max_estimate,
        bound,
        stages,
        max_share,
        diverging,
        region_empty: false,
        pass: !diverging && max_estimate <= 1.1 * bound,
    }
}

/// Flat JSON shape shared by all models, e.g.
/// `{"oracle":"additive_gaussian","sigma":0.1,"G":1.0,"p":3.0,"M0":10.0,"M1":50.0,"delta":0.05}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleRepr {
    oracle: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dof: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spread: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(rename = "G")]
    growth: f64,
    p: f64,
    #[serde(rename = "M0")]
    m0: f64,
    #[serde(rename = "M1")]
    m1: f64,
    delta: f64,
}

impl TryFrom<OracleRepr> for GradientOracle {
    type Error = OracleError;

    fn try_from(repr: OracleRepr) -> Result<Self, OracleError> {
        let need = |v: Option<f64>, name: &'static str| v.ok_or(OracleError::MissingField(name));
        let noise = match repr.oracle.as_str() {
            "additive_gaussian" => NoiseModel::AdditiveGaussian {
                sigma: need(repr.sigma, "sigma")?,
            },
            "additive_student_t" => NoiseModel::AdditiveStudentT {
                dof: need(repr.dof, "dof")?,
                scale: need(repr.scale, "scale")?,
            },
            "multiplicative_gaussian" => NoiseModel::MultiplicativeGaussian {
                sigma: need(repr.sigma, "sigma")?,
            },
            "pareto_additive" => NoiseModel::ParetoAdditive {
                alpha: need(repr.alpha, "alpha")?,
                scale: need(repr.scale, "scale")?,
            },
            "finite_sum" => NoiseModel::FiniteSum {
                components: repr
                    .components
                    .ok_or(OracleError::MissingField("components"))?,
                batch: repr.batch.ok_or(OracleError::MissingField("batch"))?,
                spread: need(repr.spread, "spread")?,
            },
            "biased_gaussian" => NoiseModel::BiasedGaussian {
                bias: need(repr.bias, "bias")?,
                sigma: need(repr.sigma, "sigma")?,
            },
            other => return Err(OracleError::UnknownId(other.to_string())),
        };
        GradientOracle::new(
            noise,
            DeclaredBounds {
                growth: repr.growth,
                p: repr.p,
                m0: repr.m0,
                m1: repr.m1,
                delta: repr.delta,
            },
        )
    }
}

impl From<GradientOracle> for OracleRepr {
    fn from(o: GradientOracle) -> Self {
        let mut repr = OracleRepr {
            oracle: String::new(),
            sigma: None,
            dof: None,
            scale: None,
            alpha: None,
            components: None,
            batch: None,
            spread: None,
            bias: None,
            growth: o.declared.growth,
            p: o.declared.p,
            m0: o.declared.m0,
            m1: o.declared.m1,
            delta: o.declared.delta,
        };
        match o.noise {
            NoiseModel::AdditiveGaussian { sigma } => {
                repr.oracle = "additive_gaussian".into();
                repr.sigma = Some(sigma);
            }
            NoiseModel::AdditiveStudentT { dof, scale } => {
                repr.oracle = "additive_student_t".into();
                repr.dof = Some(dof);
                repr.scale = Some(scale);
            }
            NoiseModel::MultiplicativeGaussian { sigma } => {
                repr.oracle = "multiplicative_gaussian".into();
                repr.sigma = Some(sigma);
            }
            NoiseModel::ParetoAdditive { alpha, scale } => {
                repr.oracle = "pareto_additive".into();
                repr.alpha = Some(alpha);
                repr.scale = Some(scale);
            }
            NoiseModel::FiniteSum {
                components,
                batch,
                spread,
            } => {
                repr.oracle = "finite_sum".into();
                repr.components = Some(components);
                repr.batch = Some(batch);
                repr.spread = Some(spread);
            }
            NoiseModel::BiasedGaussian { bias, sigma } => {
                repr.oracle = "biased_gaussian".into();
                repr.bias = Some(bias);
                repr.sigma = Some(sigma);
            }
        }
        repr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Problem;

    fn bounds(growth: f64) -> DeclaredBounds {
        DeclaredBounds {
            growth,
            p: 3.0,
            m0: 10.0,
            m1: 50.0,
            delta: 0.05,
        }
    }

    fn gaussian(sigma: f64, growth: f64) -> GradientOracle {
        GradientOracle::new(NoiseModel::AdditiveGaussian { sigma }, bounds(growth)).unwrap()
    }

    #[test]
    fn construction_rejects_invalid_parameters() {
        assert!(matches!(
            GradientOracle::new(
                NoiseModel::ParetoAdditive {
                    alpha: 2.0,
                    scale: 1.0
                },
                bounds(1.0)
            ),
            Err(OracleError::BadParameter { name: "alpha", .. })
        ));
        assert!(matches!(
            GradientOracle::new(
                NoiseModel::AdditiveStudentT {
                    dof: 2.0,
                    scale: 1.0
                },
                bounds(1.0)
            ),
            Err(OracleError::BadParameter { name: "dof", .. })
        ));
        assert!(matches!(
            GradientOracle::new(
                NoiseModel::FiniteSum {
                    components: 4,
                    batch: 5,
                    spread: 1.0
                },
                bounds(1.0)
            ),
            Err(OracleError::BadBatch { .. })
        ));
        let mut b = bounds(1.0);
        b.p = 2.0;
        assert!(GradientOracle::new(NoiseModel::AdditiveGaussian { sigma: 0.1 }, b).is_err());
    }

    #[test]
    fn unbiased_check_passes_for_gaussian_noise() {
        let problem = Problem::isotropic_quadratic(3, 1.0).unwrap();
        let oracle = gaussian(0.1, 1.0);
        let theta = vec![0.7, -0.2, 1.3];
        let check = check_unbiased(&oracle, &problem, &theta, 1_000_000, 5).unwrap();
        assert!(check.pass, "z = {:?}", check.z_scores);
        // |mean deviation| <= 4 sigma / sqrt(n) per coordinate is the same
        // statement in unstudentized form.
        for z in &check.z_scores {
            assert!(z.abs() <= 4.0);
        }
    }

    #[test]
    fn unbiased_check_catches_a_deliberate_bias() {
        let problem = Problem::isotropic_quadratic(2, 1.0).unwrap();
        let oracle = GradientOracle::new(
            NoiseModel::BiasedGaussian {
                bias: 0.1,
                sigma: 0.5,
            },
            bounds(2.0),
        )
        .unwrap();
        let check = check_unbiased(&oracle, &problem, &[0.4, -0.9], 100_000, 5).unwrap();
        assert!(!check.pass);
        // Expected z near 0.1 / (0.5 / sqrt(1e5)) ~ 63.
        for z in &check.z_scores {
            assert!(*z > 50.0 && *z < 80.0, "z = {z}");
        }
    }

    #[test]
    fn noiseless_oracle_scores_zero() {
        let problem = Problem::isotropic_quadratic(2, 1.0).unwrap();
        let oracle = gaussian(0.0, 1.0);
        let check = check_unbiased(&oracle, &problem, &[1.0, 2.0], 100, 5).unwrap();
        assert!(check.pass);
        assert_eq!(check.z_scores, vec![0.0, 0.0]);
    }

    #[test]
    fn multiplicative_and_student_t_models_stay_centered() {
        let problem = Problem::isotropic_quadratic(3, 1.0).unwrap();
        let theta = vec![0.5, -1.0, 0.25];
        let mult = GradientOracle::new(
            NoiseModel::MultiplicativeGaussian { sigma: 0.2 },
            bounds(2.0),
        )
        .unwrap();
        let st = GradientOracle::new(
            NoiseModel::AdditiveStudentT {
                dof: 4.0,
                scale: 0.3,
            },
            bounds(2.0),
        )
        .unwrap();
        for oracle in [mult, st] {
            let check = check_unbiased(&oracle, &problem, &theta, 400_000, 17).unwrap();
            assert!(check.pass, "z = {:?}", check.z_scores);
        }
    }

    #[test]
    fn weak_growth_passes_at_declared_factor() {
        // sigma = 0.1 in d = 10: analytic requirement max(1, 0.01 * 10) = 1.
        let problem = Problem::isotropic_quadratic(10, 1.0).unwrap();
        let oracle = gaussian(0.1, 1.0);
        oracle.validate_growth(10).unwrap();
        let points: Vec<Vec<f64>> = vec![vec![0.0; 10], vec![0.3; 10], vec![-1.0; 10]];
        let check = check_weak_growth(&oracle, &problem, &points, 50_000, 23).unwrap();
        assert!(check.pass, "observed {}", check.observed);
    }

    #[test]
    fn understated_growth_factor_is_rejected_analytically() {
        let oracle = gaussian(1.0, 1.0); // requirement in d = 10 is 10
        assert!(matches!(
            oracle.validate_growth(10),
            Err(OracleError::GrowthTooSmall { .. })
        ));
    }

    #[test]
    fn finite_sum_components_cancel_exactly_and_full_batch_is_exact() {
        let oracle = GradientOracle::new(
            NoiseModel::FiniteSum {
                components: 8,
                batch: 8,
                spread: 0.5,
            },
            bounds(1.0),
        )
        .unwrap();
        let ctx = oracle.prepare(5);
        let comps = ctx.components.as_ref().unwrap();
        for j in 0..5 {
            let total: f64 = comps.iter().map(|c| c[j]).sum();
            assert_eq!(total, 0.0, "coordinate {j}");
        }
        let problem = Problem::isotropic_quadratic(5, 1.0).unwrap();
        let theta = vec![0.2, -0.4, 1.0, 0.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = oracle.sample(&problem, &theta, &mut rng).unwrap();
        assert_eq!(g, problem.gradient(&theta).unwrap());
    }

    #[test]
    fn finite_sum_variance_scales_inversely_with_batch() {
        let problem = Problem::isotropic_quadratic(4, 1.0).unwrap();
        let theta = vec![0.5; 4];
        let grad = problem.gradient(&theta).unwrap();
        let spread = 1.0;
        let var_of = |batch: usize, seed: u64| {
            let oracle = GradientOracle::new(
                NoiseModel::FiniteSum {
                    components: 64,
                    batch,
                    spread,
                },
                bounds(2.0),
            )
            .unwrap();
            let ctx = oracle.prepare(4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = vec![0.0; 4];
            let n = 100_000;
            let mut acc = 0.0;
            for _ in 0..n {
                oracle.sample_with(&ctx, &grad, &mut rng, &mut g);
                acc += crate::util::l2_dist(&g, &grad).powi(2);
            }
            acc / n as f64
        };
        let ratio = var_of(2, 41) / var_of(8, 42);
        // Exact scaling gives 4; accept [0.7, 1.4] x 4.
        assert!(ratio > 2.8 && ratio < 5.6, "ratio = {ratio}");
    }

    #[test]
    fn gaussian_third_moment_passes_against_its_analytic_bound() {
        // AdditiveGaussian on an isotropic quadratic, sublevel gap 0.5 in
        // d = 2: on the region, grad norm <= 1, and
        // E norm(g)^3 <= sum_k C(3,k) a^(3-k) sigma^k E norm(Z)^k with chi(2)
        // moments E norm(Z) = 1.2533, E norm(Z)^2 = 2, E norm(Z)^3 = 3.7599.
        let problem = Problem::isotropic_quadratic(2, 1.0).unwrap();
        let sigma = 0.1;
        let a: f64 = 1.0;
        let analytic = a.powi(3)
            + 3.0 * a.powi(2) * sigma * 1.2533
            + 3.0 * a * sigma * sigma * 2.0
            + sigma.powi(3) * 3.7599;
        let m0 = analytic.cbrt();
        let oracle = GradientOracle::new(
            NoiseModel::AdditiveGaussian { sigma },
            DeclaredBounds {
                growth: 1.0,
                p: 3.0,
                m0,
                m1: 50.0,
                delta: 0.05,
            },
        )
        .unwrap();
        let check = check_local_moments(
            &oracle,
            &problem,
            MomentRegion::SublevelGap { gap: 0.5 },
            3.0,
            oracle.sublevel_moment_bound(),
            8,
            31,
        );
        assert!(!check.region_empty);
        assert!(!check.diverging, "stages {:?}", check.stages);
        assert!(
            check.pass,
            "estimate {} vs bound {}",
            check.max_estimate, check.bound
        );
    }

    #[test]
    fn pareto_second_moment_is_finite_but_higher_moment_diverges() {
        let problem = Problem::isotropic_quadratic(2, 1.0).unwrap();
        let alpha = 3.5;
        let scale = 1.0;
        let per_coord = alpha * scale * scale / (alpha - 2.0);
        let oracle = GradientOracle::new(
            NoiseModel::ParetoAdditive { alpha, scale },
            DeclaredBounds {
                growth: 1f64.max(2.0 * per_coord),
                p: 3.0,
                m0: 10.0,
                m1: 50.0,
                delta: 0.05,
            },
        )
        .unwrap();
        // Order 2 stabilizes.
        let second = check_local_moments(
            &oracle,
            &problem,
            MomentRegion::SublevelGap { gap: 0.5 },
            2.0,
            10.0,
            4,
            37,
        );
        assert!(!second.diverging, "share {}", second.max_share);
        assert!(second.pass);
        // Order 2p - 2 = 4 exceeds the tail index: flagged as diverging.
        let fourth = check_local_moments(
            &oracle,
            &problem,
            MomentRegion::SublevelGap { gap: 0.5 },
            4.0,
            1e12,
            4,
            37,
        );
        assert!(
            fourth.diverging,
            "share {} stages {:?}",
            fourth.max_share, fourth.stages
        );
        assert!(!fourth.pass);
    }

    #[test]
    fn empty_region_is_reported_not_thrown() {
        let problem = Problem::isotropic_quadratic(2, 1.0).unwrap();
        let oracle = gaussian(0.1, 1.0);
        // No point has a loss gap below zero.
        let check = check_local_moments(
            &oracle,
            &problem,
            MomentRegion::SublevelGap { gap: -1.0 },
            3.0,
            1.0,
            4,
            43,
        );
        assert!(check.region_empty);
        assert!(!check.pass);
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknowns() {
        let json = r#"{"oracle":"additive_gaussian","sigma":0.1,"G":1.0,"p":3.0,"M0":10.0,"M1":50.0,"delta":0.05}"#;
        let oracle: GradientOracle = serde_json::from_str(json).unwrap();
        assert_eq!(oracle.declared().p, 3.0);
        assert!(matches!(
            oracle.noise(),
            NoiseModel::AdditiveGaussian { sigma } if *sigma == 0.1
        ));
        let back = serde_json::to_string(&oracle).unwrap();
        let again: GradientOracle = serde_json::from_str(&back).unwrap();
        assert_eq!(oracle, again);

        let extra = r#"{"oracle":"additive_gaussian","sigma":0.1,"G":1.0,"p":3.0,"M0":10.0,"M1":50.0,"delta":0.05,"zeta":1}"#;
        assert!(serde_json::from_str::<GradientOracle>(extra).is_err());
        let unknown =
            r#"{"oracle":"gaussian","sigma":0.1,"G":1.0,"p":3.0,"M0":10.0,"M1":50.0,"delta":0.05}"#;
        assert!(serde_json::from_str::<GradientOracle>(unknown).is_err());
    }

    #[test]
    fn sampling_checks_dimensions() {
        let problem = Problem::isotropic_quadratic(3, 1.0).unwrap();
        let oracle = gaussian(0.1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            oracle.sample(&problem, &[0.0; 2], &mut rng),
            Err(OracleError::DimensionMismatch { .. })
        ));
    }
}
