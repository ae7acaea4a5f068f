//! Minibatch SGD with optional momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{loss, LossHooks};
use super::{forward, fuse_backward, FusionConfig, FusionWeights};
use crate::dataset::FramePair;
use crate::error::{Error, Result};
use crate::grid::BevGrid;
use crate::mix64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: BevGrid,
    pub label: BevGrid,
}

impl From<FramePair> for TrainingPair {
    fn from(p: FramePair) -> Self {
        Self { input: p.input, label: p.label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 0.05, momentum: 0.9, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub weights: FusionWeights,
    /// Mean minibatch loss before each update.
    pub loss_curve: Vec<f64>,
}

fn check_pairs(pairs: &[TrainingPair], cfg: &FusionConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Shape("training set is empty".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        for g in [&p.input, &p.label] {
            if g.rows() != cfg.rows || g.cols() != cfg.cols {
                return Err(Error::Shape(format!(
                    "pair {i} is {}×{}, model expects {}×{}",
                    g.rows(),
                    g.cols(),
                    cfg.rows,
                    cfg.cols
                )));
            }
        }
    }
    Ok(())
}

/// Loss and gradient summed over `batch`, reduced in batch order.
fn batch_gradient(
    pairs: &[TrainingPair],
    batch: &[usize],
    w: &FusionWeights,
    cfg: &FusionConfig,
    hooks: &LossHooks,
) -> Result<(f64, FusionWeights)> {
    let parts: Vec<Result<(f64, FusionWeights)>> = batch
        .par_iter()
        .map(|&i| {
            let p = &pairs[i];
            let cache = forward(&p.input, w, cfg)?;
            let l = loss(&cache.output, &p.label, cfg, hooks)?;
            Ok((l.total, fuse_backward(w, cfg, &cache, &l.grad)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = FusionWeights::zeros_like(w);
    for part in parts {
        let (l, g) = part?;
        total += l;
        grad.scaled_add(1.0, &g);
    }
    Ok((total, grad))
}

/// Mean loss of `w` over every pair.
pub fn dataset_loss(pairs: &[TrainingPair], w: &FusionWeights, cfg: &FusionConfig, hooks: &LossHooks) -> Result<f64> {
    check_pairs(pairs, cfg)?;
    let losses: Vec<Result<f64>> =
        pairs.par_iter().map(|p| Ok(loss(&forward(&p.input, w, cfg)?.output, &p.label, cfg, hooks)?.total)).collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains from a seeded initialization. Minibatches walk a reshuffled
/// permutation of the pairs each epoch.
pub fn train_toy(
    pairs: &[TrainingPair],
    cfg: &FusionConfig,
    tc: &TrainConfig,
    hooks: &LossHooks,
) -> Result<TrainResult> {
    cfg.validate()?;
    check_pairs(pairs, cfg)?;
    if tc.batch_size == 0 || !(tc.lr >= 0.0) || !(0.0..1.0).contains(&tc.momentum) {
        return Err(Error::Config(format!("invalid training settings {tc:?}")));
    }
    let init = FusionWeights::init(cfg, tc.seed);
    train_from(init, pairs, cfg, tc, hooks)
}

/// Like [`train_toy`] but starting from given weights.
pub fn train_from(
    mut w: FusionWeights,
    pairs: &[TrainingPair],
    cfg: &FusionConfig,
    tc: &TrainConfig,
    hooks: &LossHooks,
) -> Result<TrainResult> {
    w.validate(cfg)?;
    check_pairs(pairs, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(tc.seed ^ 0x5EED));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut velocity = FusionWeights::zeros_like(&w);
    let mut curve = Vec::with_capacity(tc.steps);
    let batch_size = tc.batch_size.min(pairs.len());

    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (total, grad) = batch_gradient(pairs, &batch, &w, cfg, hooks)?;
        let mean = total / batch.len() as f64;
        if !mean.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence { step, loss: mean });
        }
        curve.push(mean);
        velocity.scale(tc.momentum);
        velocity.scaled_add(1.0 / batch.len() as f64, &grad);
        w.scaled_add(-tc.lr, &velocity);
    }
    Ok(TrainResult { weights: w, loss_curve: curve })
}
