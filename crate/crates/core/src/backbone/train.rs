use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{BatchStats, Mode, Model, BN_MOMENTUM};
use super::spec::BackboneSpec;
use crate::data::{augment_image, Augment, LabeledSet, View};
use crate::engine::{Array, Tape};
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::optim::{cosine_lr, Sgd};

/// Squeeze-phase training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: Augment,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine: bool,
    /// Keep every step's batch-norm statistics in the report.
    #[serde(skip)]
    pub record_bn: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            augment: Augment::CropFlip,
            cosine: true,
            record_bn: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Eval-mode accuracy on the unaugmented training set after training.
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    /// Per-step batch-norm statistics, when requested.
    pub bn_history: Vec<Vec<BatchStats>>,
}

/// Batch of augmented views of `idx` drawn from `rng`.
pub(crate) fn augmented_batch(data: &LabeledSet, idx: &[usize], aug: Augment, rng: &mut ChaCha8Rng) -> Array {
    let shape = data.image_shape();
    let mut out = data.images.select_rows(idx);
    for k in 0..idx.len() {
        let view = View::draw(aug, rng);
        let img = augment_image(out.row(k), shape, view);
        out.row_mut(k).copy_from_slice(&img);
    }
    out
}

/// Trains `model` with cross-entropy and momentum SGD, updating batch-norm
/// running statistics from every step's batch statistics.
pub fn pretrain(model: &mut Model, data: &LabeledSet, cfg: &PretrainConfig, seed: u64) -> Result<PretrainReport> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("pretrain needs epochs >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("pretrain on an empty dataset".into()));
    }
    if data.classes != model.classes() {
        return Err(Error::Mismatch(format!(
            "dataset has {} classes, {} expects {}",
            data.classes,
            model.name(),
            model.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = cfg.batch_size.max(2);
    let steps_per_epoch = data.len().div_ceil(bs);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = PretrainReport {
        train_accuracy: 0.0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        bn_history: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            // Single-image batches have degenerate batch-norm statistics.
            if idx.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let x = augmented_batch(data, idx, cfg.augment, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let f = model.forward(&mut tape, xv, Mode::Train, true)?;
            let loss = cross_entropy(&mut tape, f.logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining {} diverged at epoch {epoch}, step {step}: loss {value}",
                    model.name()
                )));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Array> = f
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            if cfg.cosine {
                opt.lr = cosine_lr(cfg.lr, step, total);
            }
            opt.step(model.params_mut(), &g);
            model.update_running(&f.bn_batch_stats, BN_MOMENTUM);
            if cfg.record_bn {
                report.bn_history.push(f.bn_batch_stats);
            }
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        report.epoch_losses.push(loss_sum / batches.max(1) as f64);
        log::debug!(
            "{} epoch {epoch}: loss {:.4}",
            model.name(),
            report.epoch_losses[epoch]
        );
    }
    model.epochs_trained += cfg.epochs;
    report.train_accuracy = model.accuracy(&data.images, &data.labels)?;
    Ok(report)
}

/// Builds and pretrains each spec in parallel; member `i` uses `seeds[i]` for
/// both initialization and data order.
pub fn pretrain_pool(
    specs: &[BackboneSpec],
    data: &LabeledSet,
    cfg: &PretrainConfig,
    seeds: &[u64],
) -> Result<Vec<(Model, PretrainReport)>> {
    assert_eq!(specs.len(), seeds.len());
    specs
        .par_iter()
        .zip(seeds)
        .map(|(spec, &seed)| {
            let mut model = Model::build(spec, seed)?;
            let report = pretrain(&mut model, data, cfg, seed ^ 0x5eed)?;
            Ok((model, report))
        })
        .collect()
}
