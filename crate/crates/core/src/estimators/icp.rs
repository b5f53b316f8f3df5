use nalgebra::Vector3;

use super::{weighted_fit, KdTree};
use crate::error::{Error, Result};
use crate::geom3d::RigidTransform;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpOutcome {
    pub transform: RigidTransform,
    /// Number of association/fit rounds performed.
    pub iterations: usize,
    /// Mean closest-point distance at the returned transform.
    pub mean_residual: f64,
}

fn associate(source: &[Vector3<f64>], tree: &KdTree, t: &RigidTransform) -> (Vec<Vector3<f64>>, f64) {
    let mut matched = Vec::with_capacity(source.len());
    let mut total = 0.0;
    for s in source {
        let (idx, d2) = tree.nearest(&t.apply(s)).expect("non-empty tree");
        matched.push(*tree.point(idx));
        total += d2.sqrt();
    }
    (matched, total / source.len() as f64)
}

/// Mean distance from each transformed source point to its nearest target point.
pub fn mean_closest_point_residual(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    t: &RigidTransform,
) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    Ok(associate(source, &KdTree::build(target), t).1)
}

/// Point-to-point ICP. A round whose fit would raise the mean residual is
/// rejected and ends the loop, so the result never scores worse than `t_init`.
pub fn icp(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    t_init: &RigidTransform,
    max_iters: usize,
    convergence_tol: f64,
) -> Result<IcpOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    if !(convergence_tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance {convergence_tol} must be positive")));
    }
    let tree = KdTree::build(target);
    let weights = vec![1.0; source.len()];
    let mut current = *t_init;
    let (mut matched, mut residual) = associate(source, &tree, &current);
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let Ok(candidate) = weighted_fit(source, &matched, &weights) else { break };
        let (next_matched, next_residual) = associate(source, &tree, &candidate);
        if next_residual > residual {
            break;
        }
        let improvement = residual - next_residual;
        current = candidate;
        matched = next_matched;
        residual = next_residual;
        if improvement < convergence_tol {
            break;
        }
    }
    Ok(IcpOutcome {
        transform: current,
        iterations,
        mean_residual: residual,
    })
}
