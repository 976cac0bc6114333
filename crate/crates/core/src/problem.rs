//! Objectives with certified smoothness and landscape data.
//!
//! A [`Problem`] bundles a differentiable objective with the constants the
//! diagnostics need to trust: the infimum `f_star`, a gradient Lipschitz
//! constant, an `(eta, d_eta)` pair tying small gradients to small loss gaps,
//! and the certified critical values. Built-in problems compute these at
//! construction (closed form where possible, bisection otherwise); custom
//! objectives supply their own certificate and own its correctness.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::sampling::{sample_ball, sample_unit};
use crate::util::{bisect, l2_dist, l2_norm};

/// Errors from problem construction and evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: problem is {expected}-dimensional, point has {got} entries")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid problem parameter: {0}")]
    InvalidParameter(String),
}

/// A differentiable objective evaluated pointwise.
pub trait Objective: Send + Sync {
    fn dimension(&self) -> usize;
    fn value(&self, theta: &[f64]) -> f64;
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]);
}

/// Constants a problem certifies about its landscape.
#[derive(Debug, Clone)]
pub struct ProblemCertificate {
    /// Global infimum of the objective.
    pub f_star: f64,
    /// Lipschitz constant of the gradient.
    pub lipschitz: f64,
    /// Gradient threshold of the small-gradient implication.
    pub eta: f64,
    /// Loss-gap bound implied by `grad norm < eta`.
    pub d_eta: f64,
    /// Whether the `(eta, d_eta)` implication actually holds; demo problems
    /// that violate it declare nominal values and set this to false.
    pub eta_condition_holds: bool,
    /// Distinct critical values `f(theta*) - f_star`, sorted ascending.
    pub critical_values: Vec<f64>,
    /// Representative critical points, one per listed value where practical.
    pub critical_points: Vec<Vec<f64>>,
    /// Whether the objective grows without bound along every escape to
    /// infinity.
    pub coercive: bool,
}

/// An objective plus its certificate.
#[derive(Clone)]
pub struct Problem {
    name: String,
    objective: Arc<dyn Objective>,
    certificate: ProblemCertificate,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dimension", &self.dimension())
            .field("certificate", &self.certificate)
            .finish()
    }
}

impl Problem {
    /// Wraps a user objective with a caller-supplied certificate.
    pub fn custom(
        name: impl Into<String>,
        objective: Arc<dyn Objective>,
        certificate: ProblemCertificate,
    ) -> Self {
        Self {
            name: name.into(),
            objective,
            certificate,
        }
    }

    /// Same objective under a different name and certificate.
    ///
    /// Useful for negative-control fixtures: keep the landscape, misstate a
    /// constant, and confirm the checks notice.
    pub fn with_certificate(
        &self,
        name: impl Into<String>,
        certificate: ProblemCertificate,
    ) -> Self {
        Self {
            name: name.into(),
            objective: self.objective.clone(),
            certificate,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.objective.dimension()
    }

    pub fn certificate(&self) -> &ProblemCertificate {
        &self.certificate
    }

    pub fn f_star(&self) -> f64 {
        self.certificate.f_star
    }

    pub fn lipschitz(&self) -> f64 {
        self.certificate.lipschitz
    }

    /// Objective value with a dimension check.
    pub fn value(&self, theta: &[f64]) -> Result<f64, ProblemError> {
        self.check_dim(theta)?;
        Ok(self.objective.value(theta))
    }

    /// Gradient with a dimension check.
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>, ProblemError> {
        self.check_dim(theta)?;
        let mut out = vec![0.0; theta.len()];
        self.objective.gradient_into(theta, &mut out);
        Ok(out)
    }

    /// Unchecked access for hot loops that validated dimensions up front.
    pub(crate) fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }

    fn check_dim(&self, theta: &[f64]) -> Result<(), ProblemError> {
        if theta.len() != self.dimension() {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dimension(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Whether a loss value sits within `delta` of some certified critical
    /// value (gaps are measured against `f_star`).
    pub fn in_critical_band(&self, f_value: f64, delta: f64) -> bool {
        let gap = f_value - self.certificate.f_star;
        self.certificate
            .critical_values
            .iter()
            .any(|v| (gap - v).abs() < delta)
    }

    /// Stable identity string used in replay fingerprints.
    pub fn identity(&self) -> String {
        format!("{}(d={})", self.name, self.dimension())
    }

    /// `f(theta) = 1/2 sum_i lambda_i theta_i^2` for a positive spectrum.
    ///
    /// Certified data is closed form: `L = max lambda`, the origin is the only
    /// critical point, and `grad norm < eta` forces
    /// `f < eta^2 / (2 min lambda)`.
    pub fn quadratic(spectrum: Vec<f64>, eta: f64) -> Result<Self, ProblemError> {
        if spectrum.is_empty() {
            return Err(ProblemError::InvalidParameter(
                "quadratic needs at least one eigenvalue".into(),
            ));
        }
        if spectrum.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(ProblemError::InvalidParameter(
                "quadratic spectrum must be positive and finite".into(),
            ));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(ProblemError::InvalidParameter(
                "eta must be positive".into(),
            ));
        }
        let d = spectrum.len();
        let l_max = spectrum.iter().cloned().fold(f64::MIN, f64::max);
        let l_min = spectrum.iter().cloned().fold(f64::MAX, f64::min);
        let certificate = ProblemCertificate {
            f_star: 0.0,
            lipschitz: l_max,
            eta,
            d_eta: eta * eta / (2.0 * l_min),
            eta_condition_holds: true,
            critical_values: vec![0.0],
            critical_points: vec![vec![0.0; d]],
            coercive: true,
        };
        Ok(Self {
            name: "quadratic".into(),
            objective: Arc::new(DiagonalQuadratic { spectrum }),
            certificate,
        })
    }

    /// Identity-spectrum quadratic in `d` dimensions.
    pub fn isotropic_quadratic(d: usize, curvature: f64) -> Result<Self, ProblemError> {
        Self::quadratic(vec![curvature; d.max(1)], 1.0).map(|mut p| {
            p.name = "quadratic".into();
            p
        })
    }

    /// Diagonal quadratic with eigenvalues spread geometrically over three
    /// decades, giving condition number 10^3 with `L = 1`.
    pub fn high_cond_quadratic(d: usize) -> Result<Self, ProblemError> {
        if d < 2 {
            return Err(ProblemError::InvalidParameter(
                "high_cond_quadratic needs d >= 2".into(),
            ));
        }
        let spectrum: Vec<f64> = (0..d)
            .map(|i| 10f64.powf(-3.0 + 3.0 * i as f64 / (d - 1) as f64))
            .collect();
        let mut p = Self::quadratic(spectrum, 1.0)?;
        p.name = "high_cond_quadratic".into();
        Ok(p)
    }

    /// Separable nonconvex objective `f(theta) = sum_i phi(theta_i)` with
    /// `phi(x) = x^2/2 + 2 cos x - c0`.
    ///
    /// Each coordinate has critical points `{0, -r, r}` where `r` solves
    /// `x = 2 sin x` on (1.8, 2.0); `c0` shifts the per-coordinate minimum
    /// (attained at both `-r` and `r`) to zero, so `f_star = 0` and the
    /// distinct critical values are `k * phi(0)` for `k = 0..=d`. The
    /// curvature `1 - 2 cos x` lies in [-1, 3], certifying `L = 3`.
    pub fn cos_quadratic(d: usize) -> Result<Self, ProblemError> {
        if d == 0 {
            return Err(ProblemError::InvalidParameter(
                "cos_quadratic needs d >= 1".into(),
            ));
        }
        let stationarity = |x: f64| x - 2.0 * x.sin();
        let r = bisect(stationarity, 1.8, 2.0, 1e-13);
        let c0 = 0.5 * r * r + 2.0 * r.cos();
        let saddle_gap = 2.0 - c0; // phi(0) after the shift

        // The small-gradient certificate: eta must be below the barrier
        // |phi'(pi/3)| so that {|phi'| < eta} splits into one component per
        // root. Around 0 the component max is phi(0) itself (phi falls away
        // from 0 toward +-r); around +-r it is the component edge, located by
        // bisection. d coordinates add up.
        let eta = 0.1;
        let phi = |x: f64| 0.5 * x * x + 2.0 * x.cos() - c0;
        let left_edge = bisect(|x: f64| stationarity(x) + eta, 1.2, r, 1e-13);
        let right_edge = bisect(|x: f64| stationarity(x) - eta, r, 4.0, 1e-13);
        let per_coord = saddle_gap.max(phi(left_edge)).max(phi(right_edge));
        let d_eta = d as f64 * per_coord * (1.0 + 1e-9);

        let critical_values: Vec<f64> = (0..=d).map(|k| k as f64 * saddle_gap).collect();
        let critical_points: Vec<Vec<f64>> = (0..=d)
            .map(|k| {
                let mut point = vec![r; d];
                for slot in point.iter_mut().take(k) {
                    *slot = 0.0;
                }
                point
            })
            .collect();

        let certificate = ProblemCertificate {
            f_star: 0.0,
            lipschitz: 3.0,
            eta,
            d_eta,
            eta_condition_holds: true,
            critical_values,
            critical_points,
            coercive: true,
        };
        Ok(Self {
            name: "cos_quadratic".into(),
            objective: Arc::new(CosineQuadratic { d, c0 }),
            certificate,
        })
    }

    /// `f(theta) = sum_i ln(1 + theta_i^2)`: coercive, but its gradient decays
    /// at infinity, so no finite `d_eta` exists for small `eta`. The declared
    /// pair is nominal and flagged as not holding; assumption checks are
    /// expected to produce a far-field witness against it.
    pub fn non_coercive_demo(d: usize) -> Result<Self, ProblemError> {
        if d == 0 {
            return Err(ProblemError::InvalidParameter(
                "non_coercive_demo needs d >= 1".into(),
            ));
        }
        let certificate = ProblemCertificate {
            f_star: 0.0,
            lipschitz: 2.0,
            eta: 0.01,
            d_eta: 5.0,
            eta_condition_holds: false,
            critical_values: vec![0.0],
            critical_points: vec![vec![0.0; d]],
            coercive: true,
        };
        Ok(Self {
            name: "non_coercive_demo".into(),
            objective: Arc::new(LogOnePlusSquare { d }),
            certificate,
        })
    }

    /// Builds a built-in problem from its config id.
    pub fn from_id(id: &str, d: usize) -> Result<Self, ProblemError> {
        match id {
            "quadratic" => Self::isotropic_quadratic(d, 1.0),
            "high_cond_quadratic" => Self::high_cond_quadratic(d),
            "cos_quadratic" => Self::cos_quadratic(d),
            "non_coercive_demo" => Self::non_coercive_demo(d),
            other => Err(ProblemError::InvalidParameter(format!(
                "unknown problem id '{other}'"
            ))),
        }
    }
}

struct DiagonalQuadratic {
    spectrum: Vec<f64>,
}

impl Objective for DiagonalQuadratic {
    fn dimension(&self) -> usize {
        self.spectrum.len()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.spectrum)
            .map(|(x, l)| l * x * x)
            .sum::<f64>()
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        for ((o, x), l) in out.iter_mut().zip(theta).zip(&self.spectrum) {
            *o = l * x;
        }
    }
}

struct CosineQuadratic {
    d: usize,
    c0: f64,
}

impl Objective for CosineQuadratic {
    fn dimension(&self) -> usize {
        self.d
    }

    fn value(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .map(|x| 0.5 * x * x + 2.0 * x.cos() - self.c0)
            .sum()
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(theta) {
            *o = x - 2.0 * x.sin();
        }
    }
}

struct LogOnePlusSquare {
    d: usize,
}

impl Objective for LogOnePlusSquare {
    fn dimension(&self) -> usize {
        self.d
    }

    fn value(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|x| (1.0 + x * x).ln()).sum()
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(theta) {
            *o = 2.0 * x / (1.0 + x * x);
        }
    }
}

/// One sub-check of the landscape assumption audit.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub pass: bool,
    /// Point at which the check failed, when one exists.
    pub witness: Option<Vec<f64>>,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(detail: impl Into<String>) -> Self {
        Self {
            pass: true,
            witness: None,
            detail: detail.into(),
        }
    }

    fn fail(witness: Vec<f64>, detail: impl Into<String>) -> Self {
        Self {
            pass: false,
            witness: Some(witness),
            detail: detail.into(),
        }
    }
}

/// Sampled audit of the landscape assumptions a problem certifies.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub lower_bound: CheckOutcome,
    pub lipschitz_gradient: CheckOutcome,
    pub coercivity_probe: CheckOutcome,
    pub eta_condition: CheckOutcome,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.lower_bound.pass
            && self.lipschitz_gradient.pass
            && self.coercivity_probe.pass
            && self.eta_condition.pass
    }
}

/// Samples points and rays to audit a problem's certificate. Failures are
/// reported with witnesses rather than raised as errors.
///
/// Points are drawn uniformly from the ball of the given radius; the
/// coercivity and far-field probes walk random rays out to radius 10^5, which
/// is where gradient-decay violations of the `(eta, d_eta)` implication show
/// up.
pub fn check_landscape_assumptions(
    problem: &Problem,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> AssumptionReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cert = problem.certificate().clone();
    let d = problem.dimension();

    let mut points = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        points.push(sample_ball(d, radius, &mut rng));
    }

    // (a) f >= f_star at every sample, up to roundoff.
    let mut lower_bound =
        CheckOutcome::pass(format!("min sampled gap >= 0 over {n_samples} points"));
    for p in &points {
        let f = problem.objective().value(p);
        if f - cert.f_star < -1e-12 * (1.0 + cert.f_star.abs()) {
            lower_bound =
                CheckOutcome::fail(p.clone(), format!("f = {f} below f_star = {}", cert.f_star));
            break;
        }
    }

    // (b) gradient Lipschitz constant on sampled pairs.
    let mut lipschitz_gradient = CheckOutcome::pass(format!(
        "max difference ratio within L = {} over {n_samples} pairs",
        cert.lipschitz
    ));
    for pair in points.windows(2) {
        let (x, y) = (&pair[0], &pair[1]);
        let gx = problem.gradient(x).expect("sampled in dimension");
        let gy = problem.gradient(y).expect("sampled in dimension");
        let dist = l2_dist(x, y);
        if dist == 0.0 {
            continue;
        }
        let ratio = l2_dist(&gx, &gy) / dist;
        if ratio > cert.lipschitz * (1.0 + 1e-9) {
            lipschitz_gradient = CheckOutcome::fail(
                x.clone(),
                format!(
                    "difference ratio {ratio} exceeds certified L = {}",
                    cert.lipschitz
                ),
            );
            break;
        }
    }

    // (c) coercivity probe along random rays.
    let n_rays = 16.min(n_samples.max(1));
    let mut coercivity_probe = CheckOutcome::pass(format!("f grows along {n_rays} random rays"));
    'rays: for _ in 0..n_rays {
        let u = sample_unit(d, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for radius in [1e2, 1e3, 1e4] {
            let point: Vec<f64> = u.iter().map(|c| c * radius).collect();
            let f = problem.objective().value(&point);
            if f <= prev {
                coercivity_probe =
                    CheckOutcome::fail(point, format!("f stopped growing at radius {radius}"));
                break 'rays;
            }
            prev = f;
        }
    }

    // (d) small gradient implies small loss gap, near and far.
    let mut eta_condition = CheckOutcome::pass(format!(
        "grad norm < {} implied gap < {} at all probes",
        cert.eta, cert.d_eta
    ));
    let probe_eta = |point: Vec<f64>, eta_condition: &mut CheckOutcome| {
        if !eta_condition.pass {
            return;
        }
        let g = problem.gradient(&point).expect("probe in dimension");
        let gap = problem.objective().value(&point) - cert.f_star;
        if l2_norm(&g) < cert.eta && gap >= cert.d_eta {
            *eta_condition = CheckOutcome::fail(
                point,
                format!("grad norm < {} but gap = {gap} >= {}", cert.eta, cert.d_eta),
            );
        }
    };
    for p in &points {
        probe_eta(p.clone(), &mut eta_condition);
    }
    for _ in 0..n_rays {
        let u = sample_unit(d, &mut rng);
        for radius in [1e3, 1e4, 1e5] {
            probe_eta(u.iter().map(|c| c * radius).collect(), &mut eta_condition);
        }
    }

    AssumptionReport {
        lower_bound,
        lipschitz_gradient,
        coercivity_probe,
        eta_condition,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::l2_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent root find for `x = 2 sin x`: fixed-point iteration with
    /// damping, far from the bisection used in the constructor.
    fn fixed_point_root() -> f64 {
        let mut x: f64 = 1.9;
        for _ in 0..200 {
            x = 0.5 * (x + 2.0 * x.sin());
        }
        x
    }

    #[test]
    fn cos_quadratic_certificate_matches_independent_oracle() {
        let p = Problem::cos_quadratic(10).unwrap();
        let r = fixed_point_root();
        // The representative minimizer (k = 0) sits at r in every coordinate.
        let all_r = &p.certificate().critical_points[0];
        assert!((all_r[0] - r).abs() < 1e-11);
        // Gradient vanishes at every listed representative.
        for point in &p.certificate().critical_points {
            let g = p.gradient(point).unwrap();
            assert!(l2_norm(&g) <= 1e-10, "grad norm {}", l2_norm(&g));
        }
        // Critical values are k * (2 - c0) and the minimum value is exactly 0.
        let f_min = p.value(all_r).unwrap();
        assert!(f_min.abs() < 1e-12);
        let saddle_gap = p.certificate().critical_values[1];
        let expect = 2.0 - (0.5 * r * r + 2.0 * r.cos());
        assert!((saddle_gap - expect).abs() < 1e-11);
        assert_eq!(p.certificate().critical_values.len(), 11);
        // Values are sorted and start at zero.
        assert_eq!(p.certificate().critical_values[0], 0.0);
        assert!(p
            .certificate()
            .critical_values
            .windows(2)
            .all(|w| w[0] < w[1]));
    }

    #[test]
    fn cos_quadratic_value_agrees_with_listed_critical_values() {
        let p = Problem::cos_quadratic(4).unwrap();
        for (k, point) in p.certificate().critical_points.iter().enumerate() {
            let f = p.value(point).unwrap();
            let expect = p.certificate().critical_values[k];
            assert!((f - expect).abs() < 1e-10, "k = {k}: {f} vs {expect}");
        }
    }

    #[test]
    fn quadratic_certificate_is_closed_form() {
        let p = Problem::quadratic(vec![0.5, 2.0], 1.0).unwrap();
        assert_eq!(p.lipschitz(), 2.0);
        assert_eq!(p.f_star(), 0.0);
        assert_eq!(p.certificate().d_eta, 1.0); // eta^2 / (2 * 0.5)
        assert_eq!(p.value(&[1.0, 1.0]).unwrap(), 1.25);
        assert_eq!(p.gradient(&[1.0, 1.0]).unwrap(), vec![0.5, 2.0]);
    }

    #[test]
    fn high_cond_quadratic_spans_three_decades() {
        let p = Problem::high_cond_quadratic(10).unwrap();
        assert!((p.lipschitz() - 1.0).abs() < 1e-12);
        // Smallest eigenvalue shows up in d_eta = eta^2 / (2 * 1e-3).
        assert!((p.certificate().d_eta - 500.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = Problem::isotropic_quadratic(3, 1.0).unwrap();
        assert_eq!(
            p.value(&[0.0; 2]),
            Err(ProblemError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        );
        assert!(p.gradient(&[0.0; 5]).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let problems = [
            Problem::isotropic_quadratic(4, 1.0).unwrap(),
            Problem::high_cond_quadratic(4).unwrap(),
            Problem::cos_quadratic(4).unwrap(),
            Problem::non_coercive_demo(4).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in &problems {
            for _ in 0..250 {
                let theta: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let g = p.gradient(&theta).unwrap();
                for i in 0..4 {
                    let h = 1e-6;
                    let mut hi = theta.clone();
                    let mut lo = theta.clone();
                    hi[i] += h;
                    lo[i] -= h;
                    let fd = (p.value(&hi).unwrap() - p.value(&lo).unwrap()) / (2.0 * h);
                    let scale = 1.0f64.max(g[i].abs());
                    assert!(
                        (fd - g[i]).abs() <= 1e-5 * scale,
                        "{}: coord {i}, fd {fd} vs grad {}",
                        p.name(),
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn lipschitz_certificates_hold_on_sampled_pairs() {
        let problems = [
            Problem::cos_quadratic(6).unwrap(),
            Problem::non_coercive_demo(6).unwrap(),
            Problem::high_cond_quadratic(6).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in &problems {
            let mut worst: f64 = 0.0;
            for _ in 0..20_000 {
                let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-6.0..6.0)).collect();
                let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-6.0..6.0)).collect();
                let gx = p.gradient(&x).unwrap();
                let gy = p.gradient(&y).unwrap();
                let dist = l2_dist(&x, &y);
                if dist > 0.0 {
                    worst = worst.max(l2_dist(&gx, &gy) / dist);
                }
            }
            assert!(
                worst <= p.lipschitz() * (1.0 + 1e-9),
                "{}: ratio {worst} vs L {}",
                p.name(),
                p.lipschitz()
            );
        }
    }

    #[test]
    fn critical_band_membership_uses_certified_values() {
        let p = Problem::cos_quadratic(2).unwrap();
        let saddle_gap = p.certificate().critical_values[1];
        assert!(p.in_critical_band(0.001, 0.01));
        assert!(p.in_critical_band(saddle_gap + 0.004, 0.01));
        assert!(!p.in_critical_band(saddle_gap / 2.0, 0.01));
    }

    #[test]
    fn assumption_audit_passes_for_certified_problems() {
        for p in [
            Problem::isotropic_quadratic(3, 1.0).unwrap(),
            Problem::cos_quadratic(3).unwrap(),
        ] {
            let report = check_landscape_assumptions(&p, 5.0, 2000, 13);
            assert!(report.all_pass(), "{}: {report:?}", p.name());
        }
    }

    #[test]
    fn assumption_audit_finds_far_field_witness_for_the_demo_problem() {
        let p = Problem::non_coercive_demo(3).unwrap();
        assert!(!p.certificate().eta_condition_holds);
        let report = check_landscape_assumptions(&p, 5.0, 500, 13);
        assert!(report.lower_bound.pass);
        assert!(report.coercivity_probe.pass, "the demo is still coercive");
        assert!(!report.eta_condition.pass);
        let witness = report.eta_condition.witness.expect("witness point");
        assert!(l2_norm(&witness) >= 1e3, "witness should live far out");
    }

    #[test]
    fn understated_lipschitz_is_caught_by_the_audit() {
        let honest = Problem::cos_quadratic(3).unwrap();
        let mut cert = honest.certificate().clone();
        cert.lipschitz = 1.0; // true constant is 3
        let shaky = Problem::custom("understated", honest.objective.clone(), cert);
        let report = check_landscape_assumptions(&shaky, 5.0, 2000, 29);
        assert!(!report.lipschitz_gradient.pass);
    }
}
