//! Training loop: Adam on mean cross-entropy with early stopping on
//! validation loss.

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::artifact::SiameseModel;
use super::data::{fixed_pairs, pair_generator, FeatureBank, PairBatch};
use super::model::bce_mean;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::eval::{eer, ScoreSet};

const VAL_SEED_SALT: u64 = 0x5eed_0f_7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    /// Generated pair batches per epoch.
    pub steps_per_epoch: usize,
    /// Size of the fixed validation pair set.
    pub val_pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 5,
            early_stop_patience: 10,
            steps_per_epoch: 40,
            val_pairs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("net", "learning_rate must be positive"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("early_stop_patience", self.early_stop_patience),
            ("steps_per_epoch", self.steps_per_epoch),
            ("val_pairs", self.val_pairs),
        ] {
            if v == 0 {
                return Err(Error::param("net", format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainData {
    pub train: FeatureBank,
    pub val: FeatureBank,
}

/// Inference-mode scores of every pair in `batches`, split by label.
pub fn score_pairs(model: &SiameseModel, batches: &[PairBatch]) -> Result<(ScoreSet, f64)> {
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for b in batches {
        let s = model.net.score_batch(&b.images_a, &b.images_b)?;
        for (&p, &l) in s.iter().zip(&b.labels) {
            if l == 1.0 {
                genuine.push(p);
            } else {
                impostor.push(p);
            }
        }
        preds.extend(s);
        labels.extend(&b.labels);
    }
    Ok((ScoreSet { genuine, impostor }, bce_mean(&preds, &labels)))
}

/// The fixed validation pairs `train` monitors.
pub fn validation_pairs(data: &TrainData, config: &TrainConfig) -> Result<Vec<PairBatch>> {
    fixed_pairs(&data.val, config.val_pairs, config.batch_size.max(16), config.seed ^ VAL_SEED_SALT)
}

fn snapshot(model: &SiameseModel) -> Vec<Tensor<f32>> {
    model.net.params().into_iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(model: &mut SiameseModel, weights: Vec<Tensor<f32>>) {
    for ((_, p), w) in model.net.params_mut().into_iter().zip(weights) {
        p.value = w;
    }
}

/// Trains in place and returns the per-epoch history. The model ends up
/// with the weights of its best validation epoch, and its metadata gets
/// the EER threshold of those weights on the validation pairs.
pub fn train(model: &mut SiameseModel, data: &TrainData, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    for bank in [&data.train, &data.val] {
        if bank.input_hw != model.config().input_hw {
            return Err(Error::shape(
                "net",
                format!("bank resolution {} does not match model input {}", bank.input_hw, model.config().input_hw),
            ));
        }
    }
    let mut gen = pair_generator(&data.train, config.seed)?;
    let val = validation_pairs(data, config)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let b = gen.next_batch(config.batch_size);
            model.net.zero_grad();
            let loss = model.net.forward_train(&b.images_a, &b.images_b, &b.labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "training loss is not finite".into(),
                });
            }
            model.net.backward();
            opt.step(&mut model.net);
            total += loss;
        }
        let train_loss = total / config.steps_per_epoch as f64;
        let (_, val_loss) = score_pairs(model, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: "validation loss is not finite".into(),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, snapshot(model)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    if let Some((_, w)) = best {
        restore(model, w);
    }
    let (scores, _) = score_pairs(model, &val)?;
    if !scores.genuine.is_empty() && !scores.impostor.is_empty() {
        model.meta.eer_threshold = Some(eer(&scores)?.1);
    }
    Ok(history)
}

/// Index (0-based) of the lowest validation loss; ties keep the earliest.
pub fn best_epoch(history: &[EpochRecord]) -> Option<usize> {
    history
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, r)| match acc {
            Some((_, b)) if r.val_loss >= b => acc,
            _ => Some((i, r.val_loss)),
        })
        .map(|(i, _)| i)
}
