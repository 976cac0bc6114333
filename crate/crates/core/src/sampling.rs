//! Shared point samplers for audits and region probes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::util::l2_norm;

/// Uniform direction on the unit sphere.
pub fn sample_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform point in the ball of the given radius.
pub fn sample_ball(d: usize, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    let u = sample_unit(d, rng);
    let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    u.into_iter().map(|x| x * r).collect()
}
