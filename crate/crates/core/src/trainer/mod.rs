//! Mini-batch training with Adam, early stopping and greedy soup, plus the
//! cross-validation driver.

mod adam;
mod cv;
mod soup;

pub use adam::{adam_step, AdamState};
pub use cv::{cross_validate, Algo, CvConfig, CvOutcome, SplitResult};
pub use soup::{greedy_soup, Checkpoint, SoupOutcome};

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::data::{features_tensor, sample_augmentation, targets_tensor, AugmentConfig, LdlSample};
use crate::error::{Error, Result};
use crate::model::heads::lnf;
use crate::model::IdrModel;
use crate::objectives::{composite_loss, kl_loss, LossWeights, PerceptualNet, KL_EPS};
use crate::rng::{substream, AUGMENT};

/// Rows per graph when evaluating without gradients.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub early_stopping: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub greedy_soup: bool,
    /// Soup candidates kept during training (lowest validation KL first).
    pub soup_pool: usize,
    pub augmentation: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            early_stopping: true,
            patience: 10,
            min_delta: 1e-4,
            greedy_soup: true,
            soup_pool: 20,
            augmentation: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.weight_decay < 0.0 || self.min_delta < 0.0 {
            return Err(Error::InvalidArgument("weight_decay and min_delta must be non-negative".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_kl: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_kl"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.val_kl.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: IdrModel,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub soup: Option<SoupOutcome>,
    /// Epoch after which early stopping fired.
    pub stopped_at: Option<usize>,
    pub best_epoch: usize,
}

/// Perceptual net for label counts above the threshold, seeded from the run.
pub fn perceptual_for(labels: usize, weights: &LossWeights, seed: u64) -> Option<PerceptualNet> {
    weights.uses_perceptual(labels).then(|| PerceptualNet::new(labels, seed))
}

/// Evaluation-mode composite loss and mean KL over `samples`.
pub fn evaluate_loss(
    model: &IdrModel,
    samples: &[LdlSample],
    weights: &LossWeights,
    perceptual: Option<&PerceptualNet>,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = substream(seed, AUGMENT, u64::MAX);
    let (mut loss, mut kl) = (0.0, 0.0);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g, &model.params.keys().map(str::to_string).collect());
        let fwd = model.forward(&mut g, &p, &features_tensor(chunk), None)?;
        let target = targets_tensor(chunk);
        let terms = composite_loss(&mut g, fwd.prediction, &target, fwd.matrix, weights, perceptual, Some(&mut rng))?;
        loss += g.item(terms.total) * chunk.len() as f64;
        kl += g.item(terms.kl) * chunk.len() as f64;
    }
    let n = samples.len() as f64;
    Ok((loss / n, kl / n))
}

/// Mean KL of evaluation-mode predictions.
pub fn mean_kl(model: &IdrModel, samples: &[LdlSample]) -> Result<f64> {
    let preds = model.predict(samples)?;
    let mut total = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        total += kl_loss(s.target.values(), p.values(), KL_EPS)?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean over samples and labels of `|mean(M_i) - d_i|`.
pub fn matrix_mean_deviation(model: &IdrModel, samples: &[LdlSample]) -> Result<f64> {
    let (_, m) = model.predict_with_matrices(samples)?;
    let (l, p) = (m.shape()[1], m.shape()[2]);
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        for (j, d) in s.target.values().iter().enumerate() {
            let row = &m.data()[(i * l + j) * p..(i * l + j + 1) * p];
            total += (row.iter().sum::<f64>() / p as f64 - d).abs();
        }
    }
    Ok(total / (samples.len() * l) as f64)
}

fn keep_best(pool: &mut Vec<Checkpoint>, c: Checkpoint, cap: usize) {
    pool.push(c);
    pool.sort_by(|a, b| a.val_kl.total_cmp(&b.val_kl).then(a.epoch.cmp(&b.epoch)));
    pool.truncate(cap.max(1));
}

/// Trains `model` on `train`, monitoring `validation`. The returned model
/// carries the soup when enabled, otherwise the best-validation parameters
/// when early stopping is on, otherwise the last epoch's.
pub fn train(
    mut model: IdrModel,
    train: &[LdlSample],
    validation: &[LdlSample],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and validation sets".into()));
    }
    let perceptual = perceptual_for(model.config.labels, weights, cfg.seed);
    let frozen = model.frozen();
    let mut state = AdamState::default();
    let mut history = Vec::new();
    let mut pool: Vec<Checkpoint> = Vec::new();
    let mut best: (f64, usize, ParamStore) = (f64::INFINITY, 0, model.params.clone());
    let mut stale = 0;
    let mut stopped_at = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng: ChaCha8Rng = substream(cfg.seed, AUGMENT, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut batch: Vec<LdlSample> = idx.iter().map(|&i| train[i].clone()).collect();
            if cfg.augmentation.enabled && batch.len() >= 2 {
                batch = sample_augmentation(&batch, &cfg.augmentation, &mut rng, lnf)?;
            }
            let mut g = Graph::new();
            let p = model.params.bind_frozen(&mut g, &frozen);
            let fwd = model.forward(&mut g, &p, &features_tensor(&batch), Some(&mut rng))?;
            let target = targets_tensor(&batch);
            let terms = composite_loss(
                &mut g,
                fwd.prediction,
                &target,
                fwd.matrix,
                weights,
                perceptual.as_ref(),
                Some(&mut rng),
            )?;
            let loss = g.item(terms.total);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let grads = g.backward(terms.total)?;
            let named = p.collect(&g, &grads);
            drop(g);
            adam_step(&mut model.params, &named, &mut state, cfg.learning_rate, cfg.weight_decay)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_kl) = evaluate_loss(&model, validation, weights, perceptual.as_ref(), cfg.seed)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_kl,
        });
        if cfg.greedy_soup {
            keep_best(
                &mut pool,
                Checkpoint {
                    params: model.params.clone(),
                    epoch,
                    val_kl,
                },
                cfg.soup_pool,
            );
        }
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.early_stopping && stale >= cfg.patience {
            stopped_at = Some(epoch);
            break;
        }
    }

    let mut soup = None;
    if cfg.greedy_soup && !pool.is_empty() {
        let mut probe = model.clone();
        let outcome = greedy_soup(&pool, |params| {
            probe.params = params.clone();
            mean_kl(&probe, validation)
        })?;
        model.params = outcome.params.clone();
        soup = Some(outcome);
    } else if cfg.early_stopping {
        model.params = best.2;
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoints: pool,
        soup,
        stopped_at,
        best_epoch: best.1,
    })
}
