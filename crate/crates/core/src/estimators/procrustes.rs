use nalgebra::{Matrix3, Vector3};

use super::{CorrespondenceSet, WeightVector};
use crate::error::{Error, Result};
use crate::geom3d::RigidTransform;

/// Relative floors below which the weighted configuration counts as degenerate.
const SPREAD_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

/// Weighted least-squares rigid fit `q ≈ R p + t` with non-negative weights.
///
/// Both sets are centered on their weighted centroids; the rotation comes from
/// the SVD of `H = Σ w q̄ p̄ᵀ = U S Vᵀ` as `R = U diag(1, 1, det(UVᵀ)) Vᵀ` and
/// `t = c_q − R c_p`.
pub fn weighted_fit(p: &[Vector3<f64>], q: &[Vector3<f64>], w: &[f64]) -> Result<RigidTransform> {
    if p.len() != q.len() || p.len() != w.len() {
        return Err(Error::InvalidInput(format!(
            "lengths differ: {} points, {} points, {} weights",
            p.len(),
            q.len(),
            w.len()
        )));
    }
    let total: f64 = w.iter().sum();
    if !(total > 1e-9) {
        return Err(Error::RankDeficient(format!("total weight {total:e}")));
    }
    let active = w.iter().filter(|&&x| x > 0.0).count();
    if active < 3 {
        return Err(Error::TooFewInliers {
            needed: 3,
            got: active,
        });
    }
    let mut cp = Vector3::zeros();
    let mut cq = Vector3::zeros();
    for ((pi, qi), &wi) in p.iter().zip(q).zip(w) {
        cp += pi * wi;
        cq += qi * wi;
    }
    cp /= total;
    cq /= total;
    let mut h = Matrix3::zeros();
    let mut spread_p = Matrix3::zeros();
    for ((pi, qi), &wi) in p.iter().zip(q).zip(w) {
        if wi == 0.0 {
            continue;
        }
        let (dp, dq) = (pi - cp, qi - cq);
        h += dq * dp.transpose() * wi;
        spread_p += dp * dp.transpose() * wi;
    }
    // General position is judged on the spread of P (eigenvalues are squared
    // extents) and on the rank of H.
    let mut spread = [0.0; 3];
    spread.copy_from_slice(spread_p.symmetric_eigenvalues().as_slice());
    spread.sort_by(f64::total_cmp);
    if !(spread[1] > SPREAD_TOL * spread[2]) {
        return Err(Error::RankDeficient(
            "weighted points are collinear or coincident".into(),
        ));
    }
    let svd = h.svd(true, true);
    let mut sv = [0.0; 3];
    sv.copy_from_slice(svd.singular_values.as_slice());
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > RANK_TOL * sv[0]) {
        return Err(Error::RankDeficient(
            "cross-covariance has rank below 2".into(),
        ));
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Ok(RigidTransform {
        rotation,
        translation: cq - rotation * cp,
    })
}

pub fn procrustes(corrs: &CorrespondenceSet, w: &WeightVector) -> Result<RigidTransform> {
    if w.len() != corrs.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} correspondences",
            w.len(),
            corrs.len()
        )));
    }
    weighted_fit(&corrs.p, &corrs.q, w.as_slice())
}

/// Unit-scale least-squares rigid fit over the masked correspondences.
pub fn umeyama(corrs: &CorrespondenceSet, inliers: &[bool]) -> Result<RigidTransform> {
    if inliers.len() != corrs.len() {
        return Err(Error::InvalidInput(format!(
            "mask of length {} for {} correspondences",
            inliers.len(),
            corrs.len()
        )));
    }
    let count = inliers.iter().filter(|&&b| b).count();
    if count < 3 {
        return Err(Error::TooFewInliers {
            needed: 3,
            got: count,
        });
    }
    let w: Vec<f64> = inliers.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    weighted_fit(&corrs.p, &corrs.q, &w)
}
