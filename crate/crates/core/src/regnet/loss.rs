use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::estimators::CorrespondenceSet;
use crate::geom3d::RigidTransform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    L1,
    L2,
    WeightedL2,
    GemanMcclure,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::L1, Metric::L2, Metric::WeightedL2, Metric::GemanMcclure];
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "weighted-l2" => Ok(Self::WeightedL2),
            "geman-mcclure" => Ok(Self::GemanMcclure),
            _ => Err(Error::InvalidInput(format!("unknown metric '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub metric: Metric,
    /// Geman-McClure scale `μ`, in squared meters.
    pub mu: f64,
    /// Treat the inputs of cascade stages after the first as constants when
    /// back-propagating. The cumulative pose in each stage's loss still
    /// carries gradient to every earlier stage.
    pub detach_stage_inputs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1e-3,
            metric: Metric::L1,
            mu: 0.1,
            detach_stage_inputs: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidInput("loss coefficients must be non-negative".into()));
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidInput(format!("Geman-McClure scale {} must be positive", self.mu)));
        }
        Ok(())
    }
}

/// Per-correspondence balance `γ_i`: `N/(2N_pos)` on positives and
/// `N/(2N_neg)` on negatives. A set with one class only is left unweighted.
pub fn class_balance(labels: &[bool]) -> Vec<f64> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return vec![1.0; labels.len()];
    }
    labels
        .iter()
        .map(|&y| if y { 0.5 * n / pos } else { 0.5 * n / neg })
        .collect()
}

fn bce_with_logits(o: f64, y: f64) -> f64 {
    o.max(0.0) - o * y + (-o.abs()).exp().ln_1p()
}

/// Balanced binary cross-entropy on logits.
pub fn loss_classification(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let gamma = class_balance(labels);
    let total: f64 = logits
        .iter()
        .zip(labels)
        .zip(&gamma)
        .map(|((&o, &y), g)| g * bce_with_logits(o, if y { 1.0 } else { 0.0 }))
        .sum();
    Ok(total / logits.len() as f64)
}

/// Mean residual penalty between `q_i` and `T p_i`.
pub fn loss_registration(
    corrs: &CorrespondenceSet,
    t: &RigidTransform,
    metric: Metric,
    weights: Option<&[f64]>,
    mu: f64,
) -> Result<f64> {
    let n = corrs.len();
    if metric == Metric::WeightedL2 && weights.map(<[f64]>::len) != Some(n) {
        return Err(Error::InvalidInput("the weighted metric needs one weight per correspondence".into()));
    }
    let total: f64 = corrs
        .p
        .iter()
        .zip(&corrs.q)
        .enumerate()
        .map(|(i, (p, q))| {
            let r = q - t.apply(p);
            match metric {
                Metric::L1 => r.abs().sum(),
                Metric::L2 => r.norm_squared(),
                Metric::WeightedL2 => weights.unwrap()[i] * r.norm_squared(),
                Metric::GemanMcclure => {
                    let s = r.norm_squared();
                    s * mu / (mu + s)
                }
            }
        })
        .sum();
    Ok(total / n as f64)
}

pub fn loss_total(loss_c: f64, loss_r: f64, alpha: f64, beta: f64) -> f64 {
    alpha * loss_c + beta * loss_r
}

/// Cascade objective: per-stage losses are averaged before weighting.
pub fn loss_total_refined(loss_c: &[f64], loss_r: &[f64], alpha: f64, beta: f64) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    loss_total(mean(loss_c), mean(loss_r), alpha, beta)
}

/// `mean(γ ⊙ BCE(logits, labels))`.
pub(crate) fn build_classification_loss(g: &mut Graph, logits: NodeId, labels: NodeId, gamma: NodeId) -> NodeId {
    let bce = g.bce_with_logits(logits, labels);
    let weighted = g.mul(bce, gamma);
    g.mean(weighted)
}

/// Residual penalty for `q − (R p + t)` with `p`, `q` of shape `[N,3]`.
pub(crate) fn build_registration_loss(
    g: &mut Graph,
    p: NodeId,
    q: NodeId,
    rotation: NodeId,
    translation: NodeId,
    weights: NodeId,
    cfg: &LossConfig,
) -> NodeId {
    let rt = g.transpose(rotation);
    let moved = g.affine(p, rt, translation);
    let r = g.sub(q, moved);
    let per_point = match cfg.metric {
        Metric::L1 => {
            let a = g.abs(r);
            g.sum_last(a)
        }
        Metric::L2 => {
            let s = g.square(r);
            g.sum_last(s)
        }
        Metric::WeightedL2 => {
            let s = g.square(r);
            let s = g.sum_last(s);
            g.mul(weights, s)
        }
        Metric::GemanMcclure => {
            let s = g.square(r);
            let s = g.sum_last(s);
            g.geman_mcclure(s, cfg.mu)
        }
    };
    g.mean(per_point)
}

/// `α·mean(L_c) + β·mean(L_r)` over stages.
pub(crate) fn build_total(g: &mut Graph, lc: &[NodeId], lr: &[NodeId], cfg: &LossConfig) -> NodeId {
    let avg = |g: &mut Graph, xs: &[NodeId], c: f64| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x);
        }
        g.scale(acc, c / xs.len() as f64)
    };
    let c = avg(g, lc, cfg.alpha);
    let r = avg(g, lr, cfg.beta);
    g.add(c, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn saturated_and_neutral_logits() {
        let labels = [true, false, true, false];
        let logits = [20.0, -20.0, 20.0, -20.0];
        assert!(loss_classification(&logits, &labels).unwrap() < 1e-6);
        let l = loss_classification(&[0.0; 4], &labels).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(loss_classification(&[0.0; 3], &labels).is_err());
    }

    #[test]
    fn balance_handles_missing_class() {
        assert_eq!(class_balance(&[true, true]), vec![1.0, 1.0]);
        assert_eq!(class_balance(&[true, false, false, false]), vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn hand_computed_residuals() {
        let p = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        let mut q = p.clone();
        q[0] = Vector3::new(3.0, 4.0, 0.0);
        let c = CorrespondenceSet::new(0, p, q).unwrap();
        let id = RigidTransform::identity();
        assert!((loss_registration(&c, &id, Metric::L1, None, 1.0).unwrap() - 7.0 / 3.0).abs() < 1e-12);
        assert!((loss_registration(&c, &id, Metric::L2, None, 1.0).unwrap() - 25.0 / 3.0).abs() < 1e-12);
        let w = [0.5, 1.0, 1.0];
        let wl2 = loss_registration(&c, &id, Metric::WeightedL2, Some(&w), 1.0).unwrap();
        assert!((wl2 - 12.5 / 3.0).abs() < 1e-12);
        assert!(loss_registration(&c, &id, Metric::WeightedL2, None, 1.0).is_err());
    }

    #[test]
    fn geman_mcclure_grid() {
        for k in 0..50 {
            let e = k as f64 * 0.1;
            let p = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
            let mut q = p.clone();
            for v in q.iter_mut() {
                *v += Vector3::new(0.0, 0.0, e);
            }
            let c = CorrespondenceSet::new(0, p, q).unwrap();
            let l = loss_registration(&c, &RigidTransform::identity(), Metric::GemanMcclure, None, 1.0).unwrap();
            assert!((l - e * e / (1.0 + e * e)).abs() < 1e-12);
        }
    }

    #[test]
    fn totals() {
        assert_eq!(loss_total(2.0, 100.0, 0.0, 1.0), 100.0);
        assert!((loss_total(2.0, 100.0, 0.5, 1e-3) - 1.1).abs() < 1e-12);
        let r = loss_total_refined(&[1.0, 3.0], &[10.0, 30.0], 0.5, 0.1);
        assert!((r - (0.5 * 2.0 + 0.1 * 20.0)).abs() < 1e-12);
    }
}
