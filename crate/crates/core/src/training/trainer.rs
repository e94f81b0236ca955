use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{forward_backward, Batch};
use super::loss::LossConfig;
use super::model::ProjectionModel;
use super::optim::{Optimizer, OptimizerKind};
use crate::attention::FocalConfig;
use crate::error::{FocalError, Result};
use crate::fragments::Corpus;

/// Parameters beyond this magnitude make squared norms overflow long before
/// they become non-finite themselves, so training stops there.
pub const PARAMETER_LIMIT: f64 = 1e100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 15,
            lr_decay: 0.1,
            decay_every: 10,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FocalError::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    /// Sample-weighted mean loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Splits `n` shuffled items into batches of `size`; a trailing batch of one
/// is folded into the previous batch since it has no negatives.
fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut bounds: Vec<(usize, usize)> = (0..n)
        .step_by(size)
        .map(|s| (s, (s + size).min(n)))
        .collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|&(s, e)| e - s == 1) {
        bounds.pop();
        bounds.last_mut().unwrap().1 = n;
    }
    bounds
}

/// Mini-batch training over the corpus's links, reshuffled every epoch from
/// a generator seeded by `cfg.seed`.
///
/// A text or image linked more than once may meet its own second link as an
/// in-batch negative; synthetic corpora have one link per instance.
pub fn train(
    model: ProjectionModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    focal: &FocalConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    focal.validate()?;
    loss_cfg.validate()?;
    let links = corpus.links()?;
    if links.len() < 2 {
        return Err(FocalError::InvalidCorpus(format!(
            "training needs at least 2 pairs, corpus has {}",
            links.len()
        )));
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, &model);
    let mut order: Vec<usize> = (0..links.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        for (start, end) in batch_bounds(order.len(), cfg.batch_size) {
            let picked = &order[start..end];
            let batch = Batch::new(
                picked.iter().map(|&p| &corpus.texts[links[p].0]).collect(),
                picked.iter().map(|&p| &corpus.images[links[p].1]).collect(),
            )?;
            let (loss, grads) = forward_backward(&model, &batch, focal, loss_cfg)?;
            if !loss.is_finite() {
                return Err(FocalError::Divergence(format!(
                    "loss became {loss} in epoch {epoch} (batch starting at position {start})"
                )));
            }
            optimizer.step(&mut model, &grads, lr);
            if !model.is_finite() || max_abs(&model) > PARAMETER_LIMIT {
                return Err(FocalError::Divergence(format!(
                    "parameters became non-finite or exceeded {PARAMETER_LIMIT:e} in epoch {epoch} (batch starting at position {start})"
                )));
            }
            total += loss * picked.len() as f64;
        }
        epoch_losses.push(total / order.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

fn max_abs(model: &ProjectionModel) -> f64 {
    model
        .blocks()
        .iter()
        .flat_map(|(_, b)| b.iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}
