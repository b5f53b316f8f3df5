//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigidreg::estimators::CorrespondenceSet;
use rigidreg::geom3d::RigidTransform;

pub fn random_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

pub fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    let axis = random_vec(rng, 1.0).normalize();
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    RigidTransform::from_axis_angle(axis * angle, random_vec(rng, 2.0))
}

/// Noiseless pair with every correspondence an inlier.
pub fn clean_pair(seed: u64, n: usize) -> (CorrespondenceSet, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_transform(&mut rng);
    let p: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 1.0)).collect();
    let q = p.iter().map(|x| gt.apply(x)).collect();
    (CorrespondenceSet::new(seed, p, q).unwrap().with_gt(gt), gt)
}

/// Ten correspondences, the last three displaced far from their matches.
pub fn ten_with_three_outliers(seed: u64) -> CorrespondenceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_transform(&mut rng);
    let p: Vec<_> = (0..10).map(|_| random_vec(&mut rng, 1.0)).collect();
    let q = p
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let noise = random_vec(&mut rng, 0.002);
            let off = if i >= 7 { random_vec(&mut rng, 1.0).normalize() * rng.random_range(0.3..1.0) } else { Vector3::zeros() };
            gt.apply(x) + noise + off
        })
        .collect();
    CorrespondenceSet::new(seed, p, q).unwrap().with_gt(gt)
}

/// Kabsch on an explicit subset, written out independently of the library.
pub fn kabsch(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Option<RigidTransform> {
    let n = p.len() as f64;
    let cp = p.iter().sum::<Vector3<f64>>() / n;
    let cq = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (b - cq) * (a - cp).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    Some(RigidTransform {
        rotation: r,
        translation: cq - r * cp,
    })
}

fn consensus(corrs: &CorrespondenceSet, t: &RigidTransform, thr: f64) -> (usize, f64, Vec<bool>) {
    let res: Vec<f64> = corrs.p.iter().zip(&corrs.q).map(|(p, q)| (q - t.apply(p)).norm()).collect();
    let mask: Vec<bool> = res.iter().map(|&r| r < thr).collect();
    let count = mask.iter().filter(|&&b| b).count();
    let mean = res.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| r).sum::<f64>() / count.max(1) as f64;
    (count, mean, mask)
}

/// Exhaustive enumeration of every non-degenerate triple: the best
/// consensus set, refit on all of its members, and that refit's mask.
pub fn ransac_exhaustive(corrs: &CorrespondenceSet, thr: f64) -> (RigidTransform, Vec<bool>) {
    let n = corrs.len();
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let idx = [i, j, k];
                let p: Vec<_> = idx.iter().map(|&s| corrs.p[s]).collect();
                let q: Vec<_> = idx.iter().map(|&s| corrs.q[s]).collect();
                if (p[1] - p[0]).cross(&(p[2] - p[0])).norm() < 1e-9 {
                    continue;
                }
                let Some(t) = kabsch(&p, &q) else { continue };
                let c = consensus(corrs, &t, thr);
                let better = best.as_ref().is_none_or(|b| c.0 > b.0 || (c.0 == b.0 && c.1 < b.1));
                if better {
                    best = Some(c);
                }
            }
        }
    }
    let mask = best.expect("some triple").2;
    let sel: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let t = kabsch(
        &sel.iter().map(|&i| corrs.p[i]).collect::<Vec<_>>(),
        &sel.iter().map(|&i| corrs.q[i]).collect::<Vec<_>>(),
    )
    .unwrap();
    let mask = consensus(corrs, &t, thr).2;
    (t, mask)
}

pub fn frob(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).norm()
}
