use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::estimators::{icp, ransac, threshold_classify, umeyama, CorrespondenceSet, WeightVector};
use crate::geom3d::{rot_error, trans_error, RigidTransform};
use crate::regnet::NetGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "regnet")]
    Regnet,
    #[serde(rename = "regnet+icp")]
    RegnetIcp,
    #[serde(rename = "regnet+umeyama")]
    RegnetUmeyama,
    #[serde(rename = "ransac")]
    Ransac,
    #[serde(rename = "ransac+umeyama")]
    RansacUmeyama,
    #[serde(rename = "icp")]
    Icp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Regnet,
        Method::RegnetIcp,
        Method::RegnetUmeyama,
        Method::Ransac,
        Method::RansacUmeyama,
        Method::Icp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Regnet => "regnet",
            Method::RegnetIcp => "regnet+icp",
            Method::RegnetUmeyama => "regnet+umeyama",
            Method::Ransac => "ransac",
            Method::RansacUmeyama => "ransac+umeyama",
            Method::Icp => "icp",
        }
    }

    pub fn uses_network(self) -> bool {
        matches!(self, Method::Regnet | Method::RegnetIcp | Method::RegnetUmeyama)
    }

    fn uses_ransac(self) -> bool {
        matches!(self, Method::Ransac | Method::RansacUmeyama)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub methods: Vec<Method>,
    pub ransac_iters: usize,
    /// Inlier distance for RANSAC scoring, meters.
    pub ransac_threshold: f64,
    pub ransac_seed: u64,
    pub icp_iters: usize,
    pub icp_tol: f64,
    /// Share of each pair's correspondences that is evaluated; a seeded
    /// subset of `max(3, ⌈fraction·N⌉)` correspondences is kept.
    pub fraction: f64,
    pub fraction_seed: u64,
    /// Replace the network's weights with the ground-truth labels.
    pub oracle_weights: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            ransac_iters: crate::estimators::RANSAC_DEFAULT_ITERS,
            ransac_threshold: 0.05,
            ransac_seed: 0,
            icp_iters: 50,
            icp_tol: 1e-6,
            fraction: 1.0,
            fraction_seed: 0,
            oracle_weights: false,
        }
    }
}

/// Per-method results over the evaluated pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub rot_mean: f64,
    pub rot_median: f64,
    pub trans_mean: f64,
    pub trans_median: f64,
    /// Mean wall-clock seconds per pair.
    pub time_mean: f64,
    /// Inlier classification accuracy, for methods that classify.
    pub accuracy: Option<f64>,
    /// Pairs on which the estimator failed and its fallback was reported.
    pub failures: usize,
    pub rot_errors: Vec<f64>,
    pub trans_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub rows: Vec<MethodRow>,
}

impl EvalReport {
    pub fn row(&self, m: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    /// The report with timings zeroed; everything else is deterministic.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.time_mean = 0.0;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,rot_mean_deg,rot_median_deg,trans_mean_m,trans_median_m,time_s,accuracy,failures\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method, r.rot_mean, r.rot_median, r.trans_mean, r.trans_median, r.time_mean, acc, r.failures
            ));
        }
        s
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Seeded subset of correspondences used for partial-fraction evaluation.
pub fn subsample(corrs: &CorrespondenceSet, fraction: f64, seed: u64) -> CorrespondenceSet {
    if fraction >= 1.0 {
        return corrs.clone();
    }
    let n = corrs.len();
    let k = ((fraction * n as f64).ceil() as usize).clamp(3.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(corrs.pair_id);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    corrs.select(&idx)
}

struct PairResult {
    method: Method,
    transform: RigidTransform,
    seconds: f64,
    classified: Option<(usize, usize)>,
    failed: bool,
}

fn accuracy(mask: &[bool], labels: Option<&Vec<bool>>) -> Option<(usize, usize)> {
    labels.map(|l| (mask.iter().zip(l).filter(|(a, b)| a == b).count(), l.len()))
}

fn evaluate_pair(
    net: Option<&(NetGraph, &Checkpoint)>,
    corrs: &CorrespondenceSet,
    opts: &EvalOptions,
) -> Result<Vec<PairResult>> {
    let mut out = Vec::with_capacity(opts.methods.len());
    let want = |m: Method| opts.methods.contains(&m);
    let labels = corrs.labels.as_ref();
    if opts.methods.iter().any(|m| m.uses_network()) {
        let (graph, ckpt) = net.ok_or_else(|| Error::InvalidInput("network methods need a checkpoint".into()))?;
        let start = Instant::now();
        let fwd = graph.forward(&ckpt.params, corrs)?;
        let net_time = start.elapsed().as_secs_f64();
        let tau = ckpt.networks[0].threshold;
        let weights = match (opts.oracle_weights, labels) {
            (true, Some(l)) => l.iter().map(|&y| if y { 0.9 } else { 0.0 }).collect(),
            (true, None) => return Err(Error::InvalidInput("oracle weights need labels".into())),
            (false, _) => fwd.weights[0].clone(),
        };
        let mask = threshold_classify(&WeightVector::new(weights)?, tau);
        let classified = accuracy(&mask, labels);
        if want(Method::Regnet) {
            out.push(PairResult {
                method: Method::Regnet,
                transform: fwd.transform,
                seconds: net_time,
                classified,
                failed: false,
            });
        }
        if want(Method::RegnetIcp) {
            let start = Instant::now();
            let res = icp(&corrs.p, &corrs.q, &fwd.transform, opts.icp_iters, opts.icp_tol);
            out.push(PairResult {
                method: Method::RegnetIcp,
                transform: res.as_ref().map(|r| r.transform).unwrap_or(fwd.transform),
                seconds: net_time + start.elapsed().as_secs_f64(),
                classified: None,
                failed: res.is_err(),
            });
        }
        if want(Method::RegnetUmeyama) {
            let start = Instant::now();
            let res = umeyama(corrs, &mask);
            out.push(PairResult {
                method: Method::RegnetUmeyama,
                transform: res.as_ref().copied().unwrap_or(fwd.transform),
                seconds: net_time + start.elapsed().as_secs_f64(),
                classified,
                failed: res.is_err(),
            });
        }
    }
    if opts.methods.iter().any(|m| m.uses_ransac()) {
        let start = Instant::now();
        let res = ransac(corrs, opts.ransac_threshold, opts.ransac_iters, opts.ransac_seed);
        let ransac_time = start.elapsed().as_secs_f64();
        let (t, mask) = match &res {
            Ok((t, m)) => (*t, m.clone()),
            Err(_) => (RigidTransform::identity(), vec![false; corrs.len()]),
        };
        let classified = accuracy(&mask, labels);
        if want(Method::Ransac) {
            out.push(PairResult {
                method: Method::Ransac,
                transform: t,
                seconds: ransac_time,
                classified,
                failed: res.is_err(),
            });
        }
        if want(Method::RansacUmeyama) {
            let start = Instant::now();
            let refit = if res.is_ok() { umeyama(corrs, &mask).ok() } else { None };
            out.push(PairResult {
                method: Method::RansacUmeyama,
                transform: refit.unwrap_or(t),
                seconds: ransac_time + start.elapsed().as_secs_f64(),
                classified,
                failed: refit.is_none(),
            });
        }
    }
    if want(Method::Icp) {
        let start = Instant::now();
        let res = icp(&corrs.p, &corrs.q, &RigidTransform::identity(), opts.icp_iters, opts.icp_tol);
        out.push(PairResult {
            method: Method::Icp,
            transform: res.as_ref().map(|r| r.transform).unwrap_or_else(|_| RigidTransform::identity()),
            seconds: start.elapsed().as_secs_f64(),
            classified: None,
            failed: res.is_err(),
        });
    }
    Ok(out)
}

/// Runs every requested method on every pair and aggregates the errors
/// against ground truth. Rows follow the order of `opts.methods`.
pub fn evaluate(checkpoint: Option<&Checkpoint>, dataset: &[CorrespondenceSet], opts: &EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.gt.is_none()) {
        return Err(Error::InvalidInput(format!("pair {} has no ground truth", s.pair_id)));
    }
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction {} outside (0, 1]", opts.fraction)));
    }
    let mut methods = opts.methods.clone();
    methods.dedup();
    let net = match checkpoint {
        Some(c) => Some((NetGraph::new(&c.networks, None)?, c)),
        None if methods.iter().any(|m| m.uses_network()) => {
            return Err(Error::InvalidInput("network methods need a checkpoint".into()))
        }
        None => None,
    };
    let per_pair: Vec<Result<Vec<PairResult>>> = dataset
        .par_iter()
        .map(|s| {
            let s = subsample(s, opts.fraction, opts.fraction_seed);
            evaluate_pair(net.as_ref(), &s, opts)
        })
        .collect();
    let per_pair: Vec<Vec<PairResult>> = per_pair.into_iter().collect::<Result<_>>()?;
    let rows = methods
        .iter()
        .map(|&m| {
            let mut rot = Vec::with_capacity(dataset.len());
            let mut trans = Vec::with_capacity(dataset.len());
            let mut time = 0.0;
            let (mut correct, mut total, mut failures) = (0, 0, 0);
            let mut classifies = false;
            for (s, results) in dataset.iter().zip(&per_pair) {
                let r = results.iter().find(|r| r.method == m).expect("every method ran");
                let gt = s.gt.expect("checked above");
                rot.push(rot_error(&r.transform.rotation, &gt.rotation));
                trans.push(trans_error(&r.transform.translation, &gt.translation));
                time += r.seconds;
                failures += r.failed as usize;
                if let Some((c, n)) = r.classified {
                    classifies = true;
                    correct += c;
                    total += n;
                }
            }
            MethodRow {
                method: m,
                rot_mean: mean(&rot),
                rot_median: median(&rot),
                trans_mean: mean(&trans),
                trans_median: median(&trans),
                time_mean: time / dataset.len() as f64,
                accuracy: (classifies && total > 0).then(|| correct as f64 / total as f64),
                failures,
                rot_errors: rot,
                trans_errors: trans,
            }
        })
        .collect();
    Ok(EvalReport {
        pairs: dataset.len(),
        rows,
    })
}
