use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use crate::autodiff::{adam_step, AdamState, Tensor};
use crate::data::{augment_pair, curriculum_theta};
use crate::error::{Error, Result};
use crate::estimators::{threshold_classify, CorrespondenceSet, WeightVector};
use crate::geom3d::{rot_error, trans_error};
use crate::regnet::{LossConfig, NetGraph, PairTensors, RegNetConfig, RegNetParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One network, or two for the refinement cascade.
    pub networks: Vec<RegNetConfig>,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; one pass over the training set when unset.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub curriculum: bool,
    pub theta_max: f64,
    /// Share of the training pairs held out for validation when a single
    /// set is split by [`split_validation`].
    pub validation_fraction: f64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            networks: vec![RegNetConfig::with_blocks(8), RegNetConfig::with_blocks(4)],
            loss: LossConfig::default(),
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            curriculum: false,
            theta_max: 50.0,
            validation_fraction: 0.1,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.networks.is_empty() || self.networks.len() > 2 {
            return bad("train one network or a two-stage cascade");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps per epoch must be positive");
        }
        if !(self.theta_max >= 0.0) {
            return bad("curriculum peak must be non-negative");
        }
        for n in &self.networks {
            n.validate()?;
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_rot_mean: Option<f64>,
    pub val_trans_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the last epoch's when
    /// there is no validation set).
    pub best: RegNetParams,
    pub best_epoch: usize,
    pub last: RegNetParams,
    pub log: Vec<EpochLog>,
}

/// Seeded split into `(train, validation)`.
pub fn split_validation(
    sets: &[CorrespondenceSet],
    fraction: f64,
    seed: u64,
) -> (Vec<CorrespondenceSet>, Vec<CorrespondenceSet>) {
    let mut idx: Vec<usize> = (0..sets.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5911_7000_0001));
    let n_val = (fraction * sets.len() as f64).round() as usize;
    let (val, train) = idx.split_at(n_val.min(sets.len().saturating_sub(1)));
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| sets[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Augmentation seed of one sample: unique per (run seed, epoch, step, slot).
fn sample_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch as u64, step as u64, slot as u64] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

fn require_labels(sets: &[CorrespondenceSet], role: &str) -> Result<()> {
    for s in sets {
        if s.labels.is_none() || s.gt.is_none() {
            return Err(Error::InvalidInput(format!(
                "{role} pair {} needs labels and ground truth",
                s.pair_id
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam on the configured objective.
///
/// Per-pair gradients may be computed in parallel but are summed in batch
/// order, so results depend only on the seed and inputs.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[CorrespondenceSet],
    val_set: &[CorrespondenceSet],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    require_labels(train_set, "training")?;
    require_labels(val_set, "validation")?;
    let net = NetGraph::new(&cfg.networks, Some(&cfg.loss))?;
    let mut params = RegNetParams::init(&cfg.networks, cfg.seed)?;
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(cfg.batch_size));
    let val_tensors: Vec<PairTensors> = val_set.iter().map(PairTensors::new).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, RegNetParams)> = None;
    let mut order: Vec<usize> = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for step in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if order.is_empty() {
                    order = (0..train_set.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                batch.push(order.pop().expect("refilled above"));
            }
            let theta = if cfg.curriculum {
                curriculum_theta(step as f64 / steps as f64, cfg.theta_max)
            } else {
                0.0
            };
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let pair = &train_set[i];
                    let aug;
                    let pair = if theta > 0.0 {
                        aug = augment_pair(pair, theta, sample_seed(cfg.seed, epoch, step, slot));
                        &aug
                    } else {
                        pair
                    };
                    let (fwd, grads) = net
                        .loss_and_grad(&params, &PairTensors::new(pair))
                        .map_err(|e| nonfinite_with_pair(e, pair.pair_id))?;
                    let loss = fwd.losses.expect("training graph has a loss").2;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("training loss on pair {}", pair.pair_id)));
                    }
                    Ok((loss, grads))
                })
                .collect();
            let mut total: Option<BTreeMap<String, Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                loss_count += 1;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (k, g) in grads {
                            acc.get_mut(&k).expect("same parameter set").add_scaled(&g, 1.0);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / cfg.batch_size as f64;
            for g in grads.values_mut() {
                g.scale_in_place(inv);
            }
            adam_step(params.tensors_mut(), &grads, &mut adam, cfg.learning_rate)?;
        }
        let mut entry = EpochLog {
            epoch,
            train_loss: loss_sum / loss_count as f64,
            val_loss: None,
            val_accuracy: None,
            val_rot_mean: None,
            val_trans_mean: None,
        };
        if !val_set.is_empty() {
            let stats = validate(&net, &params, val_set, &val_tensors)?;
            entry.val_loss = Some(stats.0);
            entry.val_accuracy = Some(stats.1);
            entry.val_rot_mean = Some(stats.2);
            entry.val_trans_mean = Some(stats.3);
            if best.as_ref().is_none_or(|(b, _, _)| stats.0 < *b) {
                best = Some((stats.0, epoch, params.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs.saturating_sub(1), params.clone()),
    };
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, &Checkpoint::new(cfg.networks.clone(), best_params.clone()))?;
    }
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        last: params,
        log,
    })
}

fn nonfinite_with_pair(e: Error, pair_id: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("pair {pair_id}: {m}")),
        other => other,
    }
}

/// Mean loss, stage-1 classification accuracy and mean rotation/translation
/// error over a labeled set.
fn validate(
    net: &NetGraph,
    params: &RegNetParams,
    sets: &[CorrespondenceSet],
    tensors: &[PairTensors],
) -> Result<(f64, f64, f64, f64)> {
    let tau = net.configs()[0].threshold;
    let per_pair: Vec<Result<(f64, usize, usize, f64, f64)>> = sets
        .par_iter()
        .zip(tensors)
        .map(|(s, t)| {
            let fwd = net
                .forward_tensors(params, t)
                .map_err(|e| nonfinite_with_pair(e, s.pair_id))?;
            let labels = s.labels.as_ref().expect("checked");
            let gt = s.gt.expect("checked");
            let mask = threshold_classify(&WeightVector::new(fwd.weights[0].clone())?, tau);
            let correct = mask.iter().zip(labels).filter(|(a, b)| a == b).count();
            Ok((
                fwd.losses.expect("training graph has a loss").2,
                correct,
                labels.len(),
                rot_error(&fwd.transform.rotation, &gt.rotation),
                trans_error(&fwd.transform.translation, &gt.translation),
            ))
        })
        .collect();
    let (mut loss, mut correct, mut total, mut rot, mut trans) = (0.0, 0, 0, 0.0, 0.0);
    for r in per_pair {
        let (l, c, n, re, te) = r?;
        loss += l;
        correct += c;
        total += n;
        rot += re;
        trans += te;
    }
    let k = sets.len() as f64;
    Ok((loss / k, correct as f64 / total as f64, rot / k, trans / k))
}
