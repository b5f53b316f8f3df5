//! Synthetic correspondence sets, inlier labeling, curriculum augmentation and
//! the on-disk dataset format.

mod format;

use nalgebra::{Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::CorrespondenceSet;
use crate::geom3d::{compose, RigidTransform};

pub use format::{
    read_dataset, read_dataset_from, to_stored_precision, write_dataset, write_dataset_to, DATASET_MAGIC, DATASET_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub pairs: usize,
    /// Correspondences per pair.
    pub n: usize,
    pub outlier_fraction: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Per-axis standard deviation of the inlier noise, meters.
    pub noise_sigma: f64,
    /// Outliers are moved away from their true match by a distance drawn
    /// uniformly from this range, in a uniformly random direction.
    pub outlier_displacement: [f64; 2],
    pub label_threshold: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            n: 256,
            outlier_fraction: 0.5,
            max_rotation_deg: 30.0,
            max_translation: 0.5,
            noise_sigma: 0.005,
            outlier_displacement: [0.25, 1.0],
            label_threshold: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n < 3 {
            return bad("at least 3 correspondences per pair");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier fraction must lie in [0, 1]");
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("bounds and noise must be non-negative");
        }
        let [lo, hi] = self.outlier_displacement;
        if !(lo > 0.0 && hi >= lo) {
            return bad("outlier displacement range must be positive and ordered");
        }
        if !(self.label_threshold >= 0.0) {
            return bad("label threshold must be non-negative");
        }
        Ok(())
    }
}

fn random_unit(rng: &mut impl Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    }
}

/// Pair `index` of the set described by `cfg`; every pair draws from its own
/// ChaCha stream, so pairs can be produced independently.
pub fn gen_pair(cfg: &GenConfig, index: usize) -> Result<CorrespondenceSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = cfg.n;
    let p: Vec<Vector3<f64>> = (0..n)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0)))
        .collect();
    let angle = rng.random_range(0.0..=cfg.max_rotation_deg).to_radians();
    let axis = random_unit(&mut rng);
    let t_dir = random_unit(&mut rng);
    let t_len = rng.random_range(0.0..=cfg.max_translation);
    let gt = RigidTransform::from_axis_angle(axis.into_inner() * angle, t_dir.into_inner() * t_len);
    let n_out = (cfg.outlier_fraction * n as f64).round() as usize;
    let outliers: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_out).into_vec();
    let mut is_outlier = vec![false; n];
    for i in outliers {
        is_outlier[i] = true;
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let [lo, hi] = cfg.outlier_displacement;
    let q = p
        .iter()
        .zip(&is_outlier)
        .map(|(x, &out)| {
            let clean = gt.apply(x);
            if out {
                let d = rng.random_range(lo..=hi);
                clean + random_unit(&mut rng).into_inner() * d
            } else {
                clean + Vector3::from_fn(|_, _| noise.sample(&mut rng))
            }
        })
        .collect();
    let set = CorrespondenceSet::new(index as u64, p, q)?.with_gt(gt);
    let labels = label_inliers(&set, &gt, cfg.label_threshold);
    set.with_labels(labels)
}

/// Labeled correspondence sets with ground truth.
pub fn gen_synthetic(cfg: &GenConfig) -> Result<Vec<CorrespondenceSet>> {
    cfg.validate()?;
    (0..cfg.pairs).map(|i| gen_pair(cfg, i)).collect()
}

fn residual(corrs: &CorrespondenceSet, gt: &RigidTransform, i: usize) -> f64 {
    (corrs.q[i] - gt.apply(&corrs.p[i])).norm()
}

/// `y_i = ‖q_i − T_gt p_i‖ < threshold`.
pub fn label_inliers(corrs: &CorrespondenceSet, gt: &RigidTransform, threshold: f64) -> Vec<bool> {
    (0..corrs.len()).map(|i| residual(corrs, gt, i) < threshold).collect()
}

pub const CALIBRATION_TOLERANCE: f64 = 0.01;
pub const CALIBRATION_ITERS: usize = 50;

/// Bisects for a positive label threshold whose global outlier fraction is
/// within ±1% of `target`.
pub fn calibrate_threshold(sets: &[CorrespondenceSet], target: f64) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("no correspondence sets to calibrate on".into()));
    }
    let mut residuals = Vec::new();
    for s in sets {
        let gt = s
            .gt
            .ok_or_else(|| Error::InvalidInput(format!("pair {} has no ground truth", s.pair_id)))?;
        residuals.extend((0..s.len()).map(|i| residual(s, &gt, i)));
    }
    let total = residuals.len() as f64;
    let fraction = |thr: f64| residuals.iter().filter(|&&r| r >= thr).count() as f64 / total;
    let max_r = residuals.iter().cloned().fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, 2.0 * max_r + 1e-9);
    for _ in 0..CALIBRATION_ITERS {
        let mid = 0.5 * (lo + hi);
        let f = fraction(mid);
        if (f - target).abs() <= CALIBRATION_TOLERANCE {
            return Ok(mid);
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Unattainable(format!(
        "outlier fraction {target} not reached within ±{CALIBRATION_TOLERANCE}"
    )))
}

/// Tent profile: `0 → θ_max` over the first half of the epoch, back to `0`
/// over the second half.
pub fn curriculum_theta(tau: f64, theta_max: f64) -> f64 {
    let tau = tau.clamp(0.0, 1.0);
    theta_max * (1.0 - (2.0 * tau - 1.0).abs())
}

/// Rotates the second scan by exactly `theta_deg` about a seeded random axis
/// through the origin; the ground truth absorbs the rotation.
pub fn augment_pair(pair: &CorrespondenceSet, theta_deg: f64, seed: u64) -> CorrespondenceSet {
    if theta_deg == 0.0 {
        return pair.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let a = RigidTransform::from_axis_angle(axis.into_inner() * theta_deg.to_radians(), Vector3::zeros());
    let mut out = pair.clone();
    for q in out.q.iter_mut() {
        *q = a.rotation * *q;
    }
    out.gt = pair.gt.map(|gt| compose(&a, &gt));
    out
}
