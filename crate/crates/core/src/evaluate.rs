//! Evaluation phase: fresh models trained on the distilled set against the
//! stored ensemble logits, plus diversity diagnostics of distilled sets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Mode, Model};
use crate::blob::{create_dir, read_toml, write_bytes, write_toml};
use crate::data::{augment_image, LabeledSet};
use crate::engine::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::one_hot;
use crate::optim::{cosine_lr, Adam};
use crate::relabel::{aug_seed, view_for_seed, SoftLabelStore};
use crate::synth::{SyntheticDataset, DD_MAX_SIDE};

/// Mean over the batch of `‖f − z̃‖² − γ·Σ y·log softmax(f)`.
pub fn kd_eval_loss(tape: &mut Tape, student: Var, target: &Array, labels: &[usize], gamma: f64) -> Result<Var> {
    let s = tape.value(student).shape().to_vec();
    if s.len() != 2 || target.shape() != s.as_slice() || labels.len() != s[0] || labels.iter().any(|&y| y >= s[1]) {
        return Err(Error::shape(
            "kd_eval_loss",
            format!("student {s:?}, target {:?}, {} labels", target.shape(), labels.len()),
        ));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be >= 0")));
    }
    if !tape.value(student).all_finite() || !target.all_finite() {
        return Err(Error::NonFinite("kd_eval_loss received non-finite logits".into()));
    }
    let b = s[0] as f64;
    let z = tape.constant(target.clone());
    let diff = tape.sub(student, z)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.sum(sq);
    let ls = tape.log_softmax(student)?;
    let y = tape.constant(one_hot(labels, s[1]));
    let picked = tape.mul(ls, y)?;
    let gt = tape.sum(picked);
    let gt = tape.scale(gt, -gamma);
    let total = tape.add(mse, gt)?;
    Ok(tape.scale(total, 1.0 / b))
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `τ²·KL(softmax(p/τ) ‖ softmax(q/τ))`.
pub fn scaled_kl(p: &[f64], q: &[f64], tau: f64) -> f64 {
    let scale = |v: &[f64]| v.iter().map(|x| x / tau).collect::<Vec<_>>();
    let (lp, lq) = (log_softmax(&scale(p)), log_softmax(&scale(q)));
    tau * tau * lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
}

/// Large-temperature limit of [`scaled_kl`]: `(1/2C)·‖d − mean(d)‖²` for
/// `d = p − q` over `C` classes.
pub fn kl_limit(p: &[f64], q: &[f64]) -> f64 {
    let c = p.len() as f64;
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / c;
    d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (2.0 * c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Preset name of the evaluation model.
    pub model: String,
    pub epochs: usize,
    pub lr: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
    pub gamma: f64,
    pub cosine: bool,
    /// The whole distilled set forms one batch when it is no larger.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: "tiny-convnet-gn".into(),
            epochs: 200,
            lr: 1e-3,
            weight_decay: 0.01,
            gamma: 0.1,
            cosine: true,
            batch_size: 100,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !crate::backbone::PRESETS.contains(&self.model.as_str()) {
            return bad(format!("unknown evaluation model `{}`", self.model));
        }
        if self.epochs == 0 || self.epochs > 200 {
            return bad(format!("evaluation epochs {} outside 1..=200", self.epochs));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} / weight_decay {} out of range", self.lr, self.weight_decay));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if self.batch_size < 2 {
            return bad("evaluation batch_size must be >= 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Top-1 accuracy on the real held-out test split.
    pub accuracy: f64,
    pub test_images: usize,
    pub distilled_images: usize,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub config: EvalConfig,
}

pub const REPORT_FILE: &str = "report.toml";
pub const CURVE_FILE: &str = "loss_curve.csv";

pub fn save_report(report: &EvalReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_toml(&dir.join(REPORT_FILE), report)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{e},{l:e}\n"));
    }
    write_bytes(&dir.join(CURVE_FILE), csv.as_bytes())
}

pub fn load_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join(REPORT_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact { stage: "evaluate", path });
    }
    read_toml(&path)
}

/// Trains a fresh `cfg.model` on the distilled set, replaying relabel epoch
/// `e mod store.epochs()` in training epoch `e`, and scores it on `test`.
pub fn train_eval_model(
    data: &SyntheticDataset,
    store: &SoftLabelStore,
    test: &LabeledSet,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Model)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation on an empty distilled set".into()));
    }
    if store.images() != data.len() || store.classes() != data.classes {
        return Err(Error::Mismatch(format!(
            "soft-label store covers {} images of {} classes, distilled set has {} of {}",
            store.images(),
            store.classes(),
            data.len(),
            data.classes
        )));
    }
    if test.image_shape() != data.image_shape() || test.classes != data.classes {
        return Err(Error::Mismatch("test split does not match the distilled images".into()));
    }
    let spec = BackboneSpec::preset(&cfg.model, data.image_shape(), data.classes)?;
    let mut model = Model::build(&spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999).with_weight_decay(cfg.weight_decay);
    let shape = data.image_shape();
    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let total = n.div_ceil(bs) * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let replay = epoch % store.epochs();
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for idx in order.chunks(bs) {
            // Batch statistics of a single image are degenerate.
            if idx.len() < 2 {
                continue;
            }
            let mut x = data.images.select_rows(idx);
            let mut z = Vec::with_capacity(idx.len() * data.classes);
            for (k, &i) in idx.iter().enumerate() {
                let seed = aug_seed(store.base_seed(), replay, i);
                z.extend_from_slice(store.lookup(i, seed)?);
                let img = augment_image(x.row(k), shape, view_for_seed(store.augment(), seed));
                x.row_mut(k).copy_from_slice(&img);
            }
            let z = Array::new(vec![idx.len(), data.classes], z)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let f = model.forward(&mut tape, xv, Mode::Train, true)?;
            let loss = kd_eval_loss(&mut tape, f.logits, &z, &labels, cfg.gamma)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "evaluation of {} diverged at epoch {epoch}: loss {value}",
                    cfg.model
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
            model.update_running(&f.bn_batch_stats, crate::backbone::BN_MOMENTUM);
            sum += value;
            batches += 1;
            step += 1;
        }
        curve.push(sum / batches.max(1) as f64);
    }
    model.epochs_trained += cfg.epochs;
    let accuracy = model.accuracy(&test.images, &test.labels)?;
    log::info!("evaluated {} on {} distilled images: top-1 {accuracy:.4}", cfg.model, n);
    let report = EvalReport {
        model: cfg.model.clone(),
        accuracy,
        test_images: test.len(),
        distilled_images: n,
        seed: cfg.seed,
        loss_curve: curve,
        config: cfg.clone(),
    };
    Ok((report, model))
}

/// Diversity of one class of distilled images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDiversity {
    pub class: usize,
    pub size: usize,
    /// Mean cosine similarity over unordered pairs of flattened images.
    pub mean_cosine: f64,
    /// Smallest eigenvalue of the (pooled) Gram matrix.
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub classes: Vec<ClassDiversity>,
    pub mean_cosine: f64,
    pub mean_min_eigenvalue: f64,
}

/// Intra-class cosine similarity and Gram spectrum floor, averaged over the
/// classes with at least two images.
pub fn diversity_metric(images: &Array, labels: &[usize]) -> Result<Diversity> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(Error::shape("diversity_metric", format!("images {s:?} with {} labels", labels.len())));
    }
    let pooled = if s[2] > DD_MAX_SIDE || s[3] > DD_MAX_SIDE {
        let mut t = Tape::new();
        let x = t.constant(images.clone());
        let p = t.adaptive_avg_pool2d(x, s[2].min(DD_MAX_SIDE), s[3].min(DD_MAX_SIDE))?;
        t.value(p).clone()
    } else {
        images.clone()
    };
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for y in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if idx.len() < 2 {
            continue;
        }
        let mut cos = 0.0;
        let mut pairs = 0;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                cos += cosine(images.row(i), images.row(j));
                pairs += 1;
            }
        }
        let m = idx.len();
        let mut gram = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                gram[a * m + b] = dot(pooled.row(idx[a]), pooled.row(idx[b]));
            }
        }
        let eig = crate::engine::jacobi_eigh(&gram, m);
        let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
        out.push(ClassDiversity {
            class: y,
            size: m,
            mean_cosine: cos / pairs as f64,
            min_eigenvalue: min,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("diversity needs a class with at least two images".into()));
    }
    let k = out.len() as f64;
    Ok(Diversity {
        mean_cosine: out.iter().map(|c| c.mean_cosine).sum::<f64>() / k,
        mean_min_eigenvalue: out.iter().map(|c| c.min_eigenvalue).sum::<f64>() / k,
        classes: out,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}
