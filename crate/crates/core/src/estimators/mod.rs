//! Classical registration baselines on correspondences and raw clouds.

mod icp;
mod kdtree;
mod procrustes;
mod ransac;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom3d::RigidTransform;

pub use icp::{icp, mean_closest_point_residual, IcpOutcome};
pub use kdtree::KdTree;
pub use procrustes::{procrustes, umeyama, weighted_fit};
pub use ransac::{ransac, RANSAC_DEFAULT_ITERS};

/// `N` paired points `(p_i, q_i)` hypothesized to satisfy `q ≈ R p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pair_id: u64,
    pub p: Vec<Vector3<f64>>,
    pub q: Vec<Vector3<f64>>,
    /// `true` marks an inlier.
    pub labels: Option<Vec<bool>>,
    pub gt: Option<RigidTransform>,
}

impl CorrespondenceSet {
    pub fn new(pair_id: u64, p: Vec<Vector3<f64>>, q: Vec<Vector3<f64>>) -> Result<Self> {
        let set = Self {
            pair_id,
            p,
            q,
            labels: None,
            gt: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} correspondences",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_gt(mut self, gt: RigidTransform) -> Self {
        self.gt = Some(gt);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.len() != self.q.len() {
            return Err(Error::InvalidInput(format!(
                "P has {} points but Q has {}",
                self.p.len(),
                self.q.len()
            )));
        }
        if self.p.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "need at least 3 correspondences, got {}",
                self.p.len()
            )));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !self.p.iter().chain(&self.q).all(finite) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.p.len() {
                return Err(Error::InvalidInput("label count mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Keeps the correspondences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pair_id: self.pair_id,
            p: indices.iter().map(|&i| self.p[i]).collect(),
            q: indices.iter().map(|&i| self.q[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            gt: self.gt,
        }
    }

    pub fn inlier_fraction(&self) -> Option<f64> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|&&b| b).count() as f64 / l.len().max(1) as f64)
    }
}

/// Per-correspondence inlier confidence, each value in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("weight {bad} outside [0, 1)")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `mask[i] = w[i] >= tau`.
pub fn threshold_classify(w: &WeightVector, tau: f64) -> Vec<bool> {
    w.as_slice().iter().map(|&v| v >= tau).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        let w = WeightVector::new(vec![0.9, 0.1]).unwrap();
        assert_eq!(threshold_classify(&w, 0.5), vec![true, false]);
        let z = WeightVector::uniform(4, 0.0).unwrap();
        assert_eq!(threshold_classify(&z, 0.5), vec![false; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let w: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let tau = rng.random_range(0.0..1.0);
            let mask = threshold_classify(&WeightVector::new(w.clone()).unwrap(), tau);
            for (m, v) in mask.iter().zip(&w) {
                assert_eq!(*m, !(*v < tau));
            }
        }
    }

    #[test]
    fn weight_range_is_enforced() {
        assert!(WeightVector::new(vec![0.0, 0.999]).is_ok());
        assert!(WeightVector::new(vec![1.0]).is_err());
        assert!(WeightVector::new(vec![-0.1]).is_err());
        assert!(WeightVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn correspondence_invariants() {
        let p = vec![Vector3::zeros(); 3];
        assert!(CorrespondenceSet::new(0, p.clone(), p[..2].to_vec()).is_err());
        assert!(CorrespondenceSet::new(0, p[..2].to_vec(), p[..2].to_vec()).is_err());
        let mut bad = p.clone();
        bad[1].x = f64::INFINITY;
        assert!(CorrespondenceSet::new(0, p.clone(), bad).is_err());
        let set = CorrespondenceSet::new(0, p.clone(), p).unwrap();
        assert!(set.clone().with_labels(vec![true]).is_err());
    }
}
