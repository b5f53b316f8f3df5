use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::eval::Method;
use crate::error::{Error, Result};
use crate::estimators::{icp, procrustes, ransac, threshold_classify, umeyama, CorrespondenceSet, WeightVector};
use crate::geom3d::{chain, RigidTransform};
use crate::regnet::NetGraph;

/// `(threshold, fraction of errors ≤ threshold)` at every distinct error and
/// every grid point, sorted by threshold.
pub fn cdf_points(errors: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("CDF of an empty error list".into()));
    }
    if let Some(e) = errors.iter().chain(grid).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("CDF input {e}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = sorted.iter().chain(grid).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let n = sorted.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
        .collect())
}

pub fn cdf_csv(errors: &[f64], grid: &[f64]) -> Result<String> {
    let mut s = String::from("threshold_deg,fraction\n");
    for (t, f) in cdf_points(errors, grid)? {
        writeln!(s, "{t},{f}").expect("writing to a String");
    }
    Ok(s)
}

pub fn cdf_export(errors: &[f64], grid: &[f64], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cdf_csv(errors, grid)?)?;
    Ok(())
}

/// Evenly spaced thresholds `0, step, 2·step, …, max`.
pub fn uniform_grid(max: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || !(max >= 0.0) {
        return Vec::new();
    }
    (0..=(max / step).floor() as usize).map(|i| i as f64 * step).collect()
}

const POSE_HEADER: &str = "index,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n";

pub fn poses_csv(poses: &[RigidTransform]) -> String {
    let mut s = String::from(POSE_HEADER);
    for (i, t) in poses.iter().enumerate() {
        write!(s, "{i}").expect("writing to a String");
        for v in t.to_row_major() {
            write!(s, ",{v}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

/// Parses rows written by [`poses_csv`]: 12 numbers per row after the index,
/// rotation row-major then translation.
pub fn parse_poses_csv(text: &str) -> Result<Vec<RigidTransform>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("transform CSV: {e}")))?;
        let fields: Vec<&str> = rec.iter().collect();
        let values = match fields.len() {
            13 => &fields[1..],
            12 => &fields[..],
            n => return Err(Error::Format(format!("transform row {line} has {n} fields"))),
        };
        let mut v = [0.0; 12];
        for (slot, f) in v.iter_mut().zip(values) {
            *slot = f
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("transform row {line}: bad number '{f}'")))?;
        }
        let raw = RigidTransform::from_row_major(&v);
        out.push(RigidTransform::new(raw.rotation, raw.translation)?);
    }
    Ok(out)
}

/// Cumulative trajectory: row i is the pose of scan i+1 in the frame of scan 1.
pub fn chain_export(pairwise: &[RigidTransform], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, poses_csv(&chain(pairwise)?))?;
    Ok(())
}

/// Estimators available to single-pair registration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegisterMethod {
    Eval(Method),
    /// Weighted Procrustes with the pair's labels as weights.
    Procrustes,
    /// Umeyama on the pair's labels.
    Umeyama,
}

impl std::str::FromStr for RegisterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procrustes" => Ok(RegisterMethod::Procrustes),
            "umeyama" => Ok(RegisterMethod::Umeyama),
            other => other.parse().map(RegisterMethod::Eval),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterOutcome {
    pub transform: RigidTransform,
    pub weights: Option<Vec<f64>>,
    pub inliers: Option<usize>,
    pub icp_iterations: Option<usize>,
    pub mean_residual: Option<f64>,
}

impl RegisterOutcome {
    fn plain(transform: RigidTransform) -> Self {
        Self {
            transform,
            weights: None,
            inliers: None,
            icp_iterations: None,
            mean_residual: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterOptions {
    pub ransac_iters: usize,
    pub ransac_threshold: f64,
    pub seed: u64,
    pub icp_iters: usize,
    pub icp_tol: f64,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            ransac_iters: crate::estimators::RANSAC_DEFAULT_ITERS,
            ransac_threshold: 0.05,
            seed: 0,
            icp_iters: 50,
            icp_tol: 1e-6,
        }
    }
}

fn labels_of(corrs: &CorrespondenceSet) -> Result<&Vec<bool>> {
    corrs
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("pair {} has no labels", corrs.pair_id)))
}

/// Registers one pair with the chosen method.
pub fn register_pair(
    corrs: &CorrespondenceSet,
    method: RegisterMethod,
    checkpoint: Option<&Checkpoint>,
    opts: &RegisterOptions,
) -> Result<RegisterOutcome> {
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    match method {
        RegisterMethod::Procrustes => {
            let w: Vec<f64> = labels_of(corrs)?.iter().map(|&y| if y { 0.5 } else { 0.0 }).collect();
            let t = procrustes(corrs, &WeightVector::new(w.clone())?)?;
            Ok(RegisterOutcome {
                weights: Some(w),
                ..RegisterOutcome::plain(t)
            })
        }
        RegisterMethod::Umeyama => {
            let mask = labels_of(corrs)?;
            Ok(RegisterOutcome {
                inliers: Some(count(mask)),
                ..RegisterOutcome::plain(umeyama(corrs, mask)?)
            })
        }
        RegisterMethod::Eval(m) if m.uses_network() => {
            let ckpt = checkpoint.ok_or_else(|| Error::InvalidInput(format!("method {m} needs a checkpoint")))?;
            let fwd = NetGraph::new(&ckpt.networks, None)?.forward(&ckpt.params, corrs)?;
            let w = fwd.weights[0].clone();
            let mask = threshold_classify(&WeightVector::new(w.clone())?, ckpt.networks[0].threshold);
            let mut out = RegisterOutcome {
                weights: Some(w),
                inliers: Some(count(&mask)),
                ..RegisterOutcome::plain(fwd.transform)
            };
            match m {
                Method::RegnetUmeyama => out.transform = umeyama(corrs, &mask)?,
                Method::RegnetIcp => {
                    let r = icp(&corrs.p, &corrs.q, &fwd.transform, opts.icp_iters, opts.icp_tol)?;
                    out.transform = r.transform;
                    out.icp_iterations = Some(r.iterations);
                    out.mean_residual = Some(r.mean_residual);
                }
                _ => {}
            }
            Ok(out)
        }
        RegisterMethod::Eval(m @ (Method::Ransac | Method::RansacUmeyama)) => {
            let (t, mask) = ransac(corrs, opts.ransac_threshold, opts.ransac_iters, opts.seed)?;
            let t = if m == Method::RansacUmeyama { umeyama(corrs, &mask)? } else { t };
            Ok(RegisterOutcome {
                inliers: Some(count(&mask)),
                ..RegisterOutcome::plain(t)
            })
        }
        RegisterMethod::Eval(_) => {
            let r = icp(&corrs.p, &corrs.q, &RigidTransform::identity(), opts.icp_iters, opts.icp_tol)?;
            Ok(RegisterOutcome {
                icp_iterations: Some(r.iterations),
                mean_residual: Some(r.mean_residual),
                ..RegisterOutcome::plain(r.transform)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_examples() {
        assert_eq!(cdf_points(&[2.0], &[]).unwrap(), vec![(2.0, 1.0)]);
        let pts = cdf_points(&[1.0, 2.0, 3.0], &[]).unwrap();
        assert_eq!(pts[1], (2.0, 2.0 / 3.0));
        assert!(cdf_points(&[], &[1.0]).is_err());
    }

    #[test]
    fn grid_points_are_included() {
        let pts = cdf_points(&[0.5, 4.0], &uniform_grid(2.0, 1.0)).unwrap();
        let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
        assert_eq!(ts, vec![0.0, 0.5, 1.0, 2.0, 4.0]);
        assert_eq!(pts[0].1, 0.0);
        assert_eq!(pts.last().unwrap().1, 1.0);
    }

    #[test]
    fn poses_round_trip_through_csv() {
        let t = RigidTransform::from_axis_angle(nalgebra::Vector3::new(0.1, -0.4, 0.3), nalgebra::Vector3::new(1.0, 2.0, -3.0));
        let back = parse_poses_csv(&poses_csv(&[t, t.inverse()])).unwrap();
        assert_eq!(back, vec![t, t.inverse()]);
        assert!(parse_poses_csv("a,b\n1,2\n").is_err());
    }
}
