//! Small vector helpers shared across modules.

/// Euclidean norm.
pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared Euclidean norm.
pub fn l2_norm_sq(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

/// Dot product; slices must have equal length.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean distance between two points of equal dimension.
pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// True when every entry is finite.
pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Root of a continuous function by bisection.
///
/// `f(lo)` and `f(hi)` must bracket a sign change; the interval is halved
/// until its width drops below `tol`. Returns the midpoint of the final
/// bracket.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let flo = f(lo);
    assert!(
        flo * f(hi) <= 0.0,
        "bisection bracket [{lo}, {hi}] does not straddle a root"
    );
    let target_sign = flo <= 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if (f(mid) <= 0.0) == target_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
