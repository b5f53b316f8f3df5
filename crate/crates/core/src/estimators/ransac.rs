use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{umeyama, weighted_fit, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geom3d::RigidTransform;

pub const RANSAC_DEFAULT_ITERS: usize = 1000;

const MAX_RESAMPLES: usize = 100;
const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct Score {
    count: usize,
    mean_residual: f64,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        self.count > other.count
            || (self.count == other.count && self.mean_residual < other.mean_residual)
    }
}

fn score(corrs: &CorrespondenceSet, t: &RigidTransform, threshold: f64) -> (Score, Vec<bool>) {
    let mut mask = Vec::with_capacity(corrs.len());
    let mut sum = 0.0;
    for (p, q) in corrs.p.iter().zip(&corrs.q) {
        let r = (q - t.apply(p)).norm();
        let inlier = r < threshold;
        if inlier {
            sum += r;
        }
        mask.push(inlier);
    }
    let count = mask.iter().filter(|&&b| b).count();
    let mean_residual = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (Score { count, mean_residual }, mask)
}

fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Minimal-sample hypothesis for iteration `k`; each iteration draws from its
/// own ChaCha stream so the result depends only on `(seed, k)`.
fn hypothesis(corrs: &CorrespondenceSet, seed: u64, k: u64) -> Option<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let n = corrs.len();
    for _ in 0..MAX_RESAMPLES {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let l = rng.random_range(0..n);
        if i == j || j == l || i == l {
            continue;
        }
        if triangle_area(&corrs.p[i], &corrs.p[j], &corrs.p[l]) < MIN_TRIANGLE_AREA {
            continue;
        }
        let p = [corrs.p[i], corrs.p[j], corrs.p[l]];
        let q = [corrs.q[i], corrs.q[j], corrs.q[l]];
        if let Ok(t) = weighted_fit(&p, &q, &[1.0; 3]) {
            return Some(t);
        }
    }
    None
}

/// Hypothesize-and-verify with 3-point minimal samples.
///
/// The best hypothesis maximizes the inlier count (ties: lower mean inlier
/// residual). It is refit with [`umeyama`] on its consensus set, and the
/// returned mask holds the inliers of that refit model.
pub fn ransac(
    corrs: &CorrespondenceSet,
    inlier_threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(RigidTransform, Vec<bool>)> {
    if corrs.len() < 3 {
        return Err(Error::InvalidInput("RANSAC needs at least 3 correspondences".into()));
    }
    if !(inlier_threshold > 0.0) || max_iters == 0 {
        return Err(Error::InvalidInput(format!(
            "invalid RANSAC settings: threshold {inlier_threshold}, iterations {max_iters}"
        )));
    }
    let mut best: Option<(Score, Vec<bool>)> = None;
    for k in 0..max_iters as u64 {
        let Some(t) = hypothesis(corrs, seed, k) else { continue };
        let (s, mask) = score(corrs, &t, inlier_threshold);
        if best.as_ref().map_or(true, |(b, _)| s.better_than(b)) {
            best = Some((s, mask));
        }
    }
    let (best_score, consensus) = best
        .filter(|(s, _)| s.count >= 3)
        .ok_or_else(|| Error::NoModel("no hypothesis reached 3 inliers".into()))?;
    debug_assert!(best_score.count >= 3);
    let refit = umeyama(corrs, &consensus)?;
    let (refit_score, mask) = score(corrs, &refit, inlier_threshold);
    if refit_score.count < 3 {
        return Err(Error::NoModel("refit model lost its consensus set".into()));
    }
    Ok((refit, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::rot_error;
    use rand_distr::{Distribution, Normal};

    fn rv(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    #[test]
    fn clean_set_is_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = RigidTransform::from_axis_angle(rv(&mut rng, 0.5), rv(&mut rng, 0.5));
        let p: Vec<_> = (0..10).map(|_| rv(&mut rng, 1.0)).collect();
        let q = p.iter().map(|x| gt.apply(x)).collect();
        let set = CorrespondenceSet::new(0, p, q).unwrap();
        let (t, mask) = ransac(&set, 0.01, 100, 3).unwrap();
        assert!(mask.iter().all(|&b| b));
        assert!((t.rotation - gt.rotation).norm() < 1e-9);
        assert!((t.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = RigidTransform::from_axis_angle(rv(&mut rng, 0.5), rv(&mut rng, 0.5));
        let p: Vec<_> = (0..200).map(|_| rv(&mut rng, 1.0)).collect();
        let q = p
            .iter()
            .enumerate()
            .map(|(i, x)| gt.apply(x) + if i % 2 == 0 { rv(&mut rng, 1.0) } else { rv(&mut rng, 0.01) })
            .collect();
        let set = CorrespondenceSet::new(0, p, q).unwrap();
        let a = ransac(&set, 0.05, 200, 42).unwrap();
        let b = ransac(&set, 0.05, 200, 42).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn half_outliers_large_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let axis = rv(&mut rng, 1.0).normalize();
        let gt = RigidTransform::from_axis_angle(axis * 25f64.to_radians(), rv(&mut rng, 0.5));
        let noise = Normal::new(0.0, 0.005).unwrap();
        let p: Vec<_> = (0..3000).map(|_| rv(&mut rng, 1.0)).collect();
        let q = p
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if i % 2 == 0 {
                    gt.apply(x) + rv(&mut rng, 1.0).normalize() * rng.random_range(0.25..1.0)
                } else {
                    gt.apply(x) + Vector3::from_fn(|_, _| noise.sample(&mut rng))
                }
            })
            .collect();
        let set = CorrespondenceSet::new(0, p, q).unwrap();
        let (t, _) = ransac(&set, 0.05, 1000, 7).unwrap();
        assert!(rot_error(&t.rotation, &gt.rotation) < 0.5);
    }

    #[test]
    fn no_model_when_nothing_agrees() {
        let p = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        let set = CorrespondenceSet::new(0, p.clone(), p).unwrap();
        assert!(matches!(ransac(&set, 0.1, 10, 0), Err(Error::NoModel(_))));
        assert!(ransac(&set, 0.0, 10, 0).is_err());
        assert!(ransac(&set, 0.1, 0, 0).is_err());
    }
}
