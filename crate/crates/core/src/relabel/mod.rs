//! Relabel phase: ensemble logits of the backbone pool on augmented views of
//! the distilled images, stored per (image, augmentation seed).

mod store;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Model;
use crate::data::{augment_image, Augment, View};
use crate::engine::Array;
use crate::error::{Error, Result};
use crate::synth::SyntheticDataset;

pub use store::{load_soft_labels, save_soft_labels, SoftLabelStore, SoftRecord, SOFT_LABEL_FILE};

/// Scope of the Frobenius norm used by logit normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnScope {
    /// One norm per member over the whole batch of logits.
    #[default]
    Batch,
    /// One norm per member and image.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    /// Number of distinct augmented views recorded per image.
    pub epochs: usize,
    /// Temperature of the probability view; records stay raw logits.
    pub tau_label: f64,
    pub use_ln: bool,
    pub ln_scope: LnScope,
    pub augment: Augment,
    /// Images per ensemble batch; also the batch of the batch-scope norm.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig {
            epochs: 20,
            tau_label: 1.0,
            use_ln: true,
            ln_scope: LnScope::Batch,
            augment: Augment::CropFlip,
            batch_size: 100,
            seed: 0,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("relabel epochs must be >= 1".into()));
        }
        if !(self.tau_label > 0.0 && self.tau_label.is_finite()) {
            return Err(Error::Config(format!("tau_label {} must be a positive number", self.tau_label)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("relabel batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Augmentation seed of `image` in relabel epoch `epoch`.
pub fn aug_seed(base: u64, epoch: usize, image: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"aug");
    h.update(base.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update((image as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// The view replayed from an augmentation seed.
pub fn view_for_seed(aug: Augment, seed: u64) -> View {
    View::draw(aug, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn frobenius(rows: &[f64]) -> f64 {
    rows.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Averages member logits `[N, K]`, each rescaled to the mean member norm
/// when `ln` is on. Zero-norm members are excluded with a warning.
fn combine(members: &[Array], ln: Option<LnScope>) -> Result<Array> {
    let shape = members[0].shape().to_vec();
    let (n, k) = (shape[0], shape[1]);
    let mut out = vec![0.0; n * k];
    // Each group is scaled and averaged independently.
    let groups: Vec<(usize, usize)> = match ln {
        Some(LnScope::Image) => (0..n).map(|i| (i * k, (i + 1) * k)).collect(),
        _ => vec![(0, n * k)],
    };
    for (lo, hi) in groups {
        let norms: Vec<f64> = members.iter().map(|m| frobenius(&m.data()[lo..hi])).collect();
        let scales: Vec<Option<f64>> = match ln {
            None => vec![Some(1.0); members.len()],
            Some(_) => {
                let live: Vec<f64> = norms.iter().copied().filter(|&v| v > 0.0).collect();
                if live.len() < norms.len() {
                    warn!(
                        "logit normalization: excluding {} zero-norm member(s)",
                        norms.len() - live.len()
                    );
                }
                let target = live.iter().sum::<f64>() / live.len().max(1) as f64;
                norms.iter().map(|&v| (v > 0.0).then(|| target / v)).collect()
            }
        };
        let used = scales.iter().flatten().count();
        if used == 0 {
            // Every member is zero here; so is their mean.
            continue;
        }
        for (m, scale) in members.iter().zip(&scales) {
            if let Some(s) = scale {
                for (o, &v) in out[lo..hi].iter_mut().zip(&m.data()[lo..hi]) {
                    *o += s * v;
                }
            }
        }
        out[lo..hi].iter_mut().for_each(|o| *o /= used as f64);
    }
    Array::new(shape, out)
}

/// Ensemble logits `[N, K]` of `pool` on `x: [N, C, H, W]` in eval mode.
///
/// With `ln`, each member's logits are rescaled by the mean member
/// Frobenius norm over its own norm before averaging.
pub fn ensemble_logits(x: &Array, pool: &[Model], ln: Option<LnScope>) -> Result<Array> {
    let first = pool
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble over an empty pool".into()))?;
    if let Some(m) = pool.iter().find(|m| m.classes() != first.classes()) {
        return Err(Error::Mismatch(format!(
            "pool members disagree on classes: {} has {}, {} has {}",
            first.name(),
            first.classes(),
            m.name(),
            m.classes()
        )));
    }
    let n = x.shape().first().copied().unwrap_or(0);
    let members = pool
        .iter()
        .map(|m| m.predict(x, n.max(1)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((m, _)) = pool.iter().zip(&members).find(|(_, z)| !z.all_finite()) {
        return Err(Error::NonFinite(format!("{} produced non-finite logits", m.name())));
    }
    combine(&members, ln)
}

/// Records the ensemble logits of every image under `cfg.epochs` seeded views.
pub fn relabel_dataset(data: &SyntheticDataset, pool: &[Model], cfg: &RelabelConfig) -> Result<SoftLabelStore> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("relabeling an empty distilled set".into()));
    }
    if let Some(m) = pool.iter().find(|m| m.classes() != data.classes) {
        return Err(Error::Mismatch(format!(
            "{} predicts {} classes, distilled set has {}",
            m.name(),
            m.classes(),
            data.classes
        )));
    }
    let ln = cfg.use_ln.then_some(cfg.ln_scope);
    let shape = data.image_shape();
    let n = data.len();
    let jobs: Vec<(usize, usize)> = (0..cfg.epochs)
        .flat_map(|e| (0..n).step_by(cfg.batch_size).map(move |s| (e, s)))
        .collect();
    let batches = jobs
        .par_iter()
        .map(|&(epoch, start)| {
            let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
            let seeds: Vec<u64> = idx.iter().map(|&i| aug_seed(cfg.seed, epoch, i)).collect();
            let mut x = data.images.select_rows(&idx);
            for (k, &s) in seeds.iter().enumerate() {
                let img = augment_image(x.row(k), shape, view_for_seed(cfg.augment, s));
                x.row_mut(k).copy_from_slice(&img);
            }
            let z = ensemble_logits(&x, pool, ln)?;
            Ok(idx
                .iter()
                .zip(seeds)
                .enumerate()
                .map(|(k, (&i, seed))| SoftRecord {
                    image: i as u32,
                    seed,
                    logits: z.row(k).to_vec(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    SoftLabelStore::new(
        store::StoreHeader {
            images: n,
            classes: data.classes,
            epochs: cfg.epochs,
            use_ln: cfg.use_ln,
            ln_scope: cfg.ln_scope,
            augment: cfg.augment,
            tau_label: cfg.tau_label,
            base_seed: cfg.seed,
        },
        batches.into_iter().flatten().collect(),
    )
}

/// `softmax(z / τ)` of one logit row.
pub fn soft_probabilities(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
