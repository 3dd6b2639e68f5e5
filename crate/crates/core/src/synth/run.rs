use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{dd_loss, sds_bn_loss, sds_conv_loss, EmaTotals};
use super::plan::{BatchPlan, PlanMode};
use crate::backbone::{Mode, Model};
use crate::data::{LabeledSet, Normalization};
use crate::engine::{Array, Tape};
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::optim::{cosine_lr, Adam};
use crate::stats::StatBank;

/// Starting point of the distilled images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Standard normal pixels in model space, clipped to the valid range.
    #[default]
    Noise,
    /// Random real training images of each class.
    RealInit,
}

/// Knobs of the recover phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Optimizer steps per batch of the plan.
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Anneal the learning rate to zero over each batch's iterations.
    pub cosine: bool,
    /// EMA decay of the matching totals; 0 matches the current batch alone.
    pub alpha: f64,
    pub tau_dd: f64,
    /// Probability of dropping each convolution matching term per step.
    pub beta_dr: f64,
    pub w_bn: f64,
    pub w_conv: f64,
    pub w_dd: f64,
    pub batch_plan: PlanMode,
    /// Target images per synthesis batch.
    pub batch_size: usize,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            iterations: 4000,
            lr: 0.05,
            beta1: 0.5,
            beta2: 0.9,
            cosine: true,
            alpha: 0.8,
            tau_dd: 4.0,
            beta_dr: 0.4,
            w_bn: 0.01,
            w_conv: 0.01,
            w_dd: 1.0,
            batch_plan: PlanMode::Reorder,
            batch_size: 50,
            init: InitMode::Noise,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta_dr) {
            return bad(format!("beta_dr {} outside [0, 1]", self.beta_dr));
        }
        if !(self.tau_dd > 0.0) {
            return bad(format!("tau_dd {} must be > 0", self.tau_dd));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "optimizer lr {} / betas ({}, {}) out of range",
                self.lr, self.beta1, self.beta2
            ));
        }
        for (name, w) in [("w_bn", self.w_bn), ("w_conv", self.w_conv), ("w_dd", self.w_dd)] {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("{name} {w} must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Distilled images `[classes·ipc, C, H, W]` in model space, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Array,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub classes: usize,
    pub normalization: Normalization,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn to_labeled(&self) -> Result<LabeledSet> {
        LabeledSet::new(self.images.clone(), self.labels.clone(), self.classes)
    }
}

/// Clips every pixel of `images: [B, C, H, W]` into its channel's bounds.
pub fn clamp_to_bounds(images: &mut Array, bounds: &[(f64, f64)]) {
    let s = images.shape().to_vec();
    let (c, plane) = (s[1], s[2] * s[3]);
    for (k, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
        let (lo, hi) = bounds[k % c];
        chunk.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// Fresh distilled set with `ipc` images per class of `data`.
pub fn init_synthetic(
    data: &LabeledSet,
    normalization: &Normalization,
    ipc: usize,
    mode: InitMode,
    seed: u64,
) -> Result<SyntheticDataset> {
    if ipc == 0 {
        return Err(Error::InvalidArgument("ipc must be >= 1".into()));
    }
    let [c, h, w] = data.image_shape();
    let k = data.classes;
    let labels: Vec<usize> = (0..k).flat_map(|y| std::iter::repeat_n(y, ipc)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = match mode {
        InitMode::Noise => {
            let n = k * ipc * c * h * w;
            let mut x = Array::new(vec![k * ipc, c, h, w], (0..n).map(|_| rng.sample(StandardNormal)).collect())?;
            clamp_to_bounds(&mut x, &normalization.bounds());
            x
        }
        InitMode::RealInit => {
            let mut picks = Vec::with_capacity(k * ipc);
            for y in 0..k {
                let pool = data.class_indices(y);
                if pool.len() < ipc {
                    return Err(Error::InvalidArgument(format!(
                        "class {y} has {} real images, cannot draw ipc {ipc}",
                        pool.len()
                    )));
                }
                picks.extend(rand::seq::index::sample(&mut rng, pool.len(), ipc).into_iter().map(|i| pool[i]));
            }
            data.images.select_rows(&picks)
        }
    };
    Ok(SyntheticDataset {
        images,
        labels,
        ipc,
        classes: k,
        normalization: normalization.clone(),
    })
}

/// Unweighted loss terms of one synthesis step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub backbone: usize,
    pub ce: f64,
    pub bn: f64,
    pub conv: f64,
    pub dd: f64,
    /// `ce + w_bn·bn + w_conv·conv + w_dd·dd`.
    pub total: f64,
}

/// One synthesis batch with its own optimizer moments.
#[derive(Clone, Debug)]
pub struct BatchState {
    pub images: Array,
    pub labels: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
    pub adam: Adam,
}

impl BatchState {
    pub fn new(images: Array, labels: Vec<usize>, bounds: Vec<(f64, f64)>, cfg: &SynthesisConfig) -> Self {
        BatchState {
            images,
            labels,
            bounds,
            adam: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
        }
    }
}

/// A pool member with its statistics.
#[derive(Clone, Copy, Debug)]
pub struct Member<'a> {
    pub model: &'a Model,
    pub bank: &'a StatBank,
}

/// One optimizer update of `state.images` against `member` at learning rate `lr`.
pub fn synth_step<R: Rng + ?Sized>(
    state: &mut BatchState,
    member: Member<'_>,
    totals: &mut EmaTotals,
    cfg: &SynthesisConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let x = tape.param(state.images.clone());
    let f = member.model.forward(&mut tape, x, Mode::Taps, false)?;
    let mut out = StepLosses::default();
    let mut total = cross_entropy(&mut tape, f.logits, &state.labels)?;
    out.ce = tape.value(total).item();
    if cfg.w_bn > 0.0 && !f.bn_taps.is_empty() {
        let bn = sds_bn_loss(&mut tape, &f.bn_taps, member.bank, totals, cfg.alpha)?;
        out.bn = tape.value(bn).item();
        let weighted = tape.scale(bn, cfg.w_bn);
        total = tape.add(total, weighted)?;
    }
    if cfg.w_conv > 0.0 {
        let m = sds_conv_loss(&mut tape, &f.conv_taps, member.bank, totals, cfg.alpha, cfg.beta_dr, rng)?;
        out.conv = tape.value(m.loss).item();
        let weighted = tape.scale(m.loss, cfg.w_conv);
        total = tape.add(total, weighted)?;
    }
    if cfg.w_dd > 0.0 {
        let dd = dd_loss(&mut tape, x, &state.labels, cfg.tau_dd)?;
        out.dd = tape.value(dd).item();
        let weighted = tape.scale(dd, cfg.w_dd);
        total = tape.add(total, weighted)?;
    }
    out.total = tape.value(total).item();
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "synthesis loss on {}: ce={} bn={} conv={} dd={}",
            member.model.name(),
            out.ce,
            out.bn,
            out.conv,
            out.dd
        )));
    }
    let grads = tape.backward(total)?;
    let g = grads.get_or_zeros(x, &state.images);
    if !g.all_finite() {
        return Err(Error::NonFinite(format!(
            "synthesis gradient on {} (ce={} bn={} conv={} dd={})",
            member.model.name(),
            out.ce,
            out.bn,
            out.conv,
            out.dd
        )));
    }
    state.adam.lr = lr;
    state.adam.step(std::slice::from_mut(&mut state.images), &[g]);
    clamp_to_bounds(&mut state.images, &state.bounds);
    Ok(out)
}

/// Uniform index into a pool of `n` members.
pub fn draw_backbone<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Result of [`run_synthesis`].
#[derive(Clone, Debug)]
pub struct SynthesisOutcome {
    pub data: SyntheticDataset,
    /// Every step in execution order.
    pub history: Vec<StepLosses>,
    /// How often each pool member was drawn.
    pub draws: Vec<usize>,
}

fn check_pool(pool: &[Model], banks: &[StatBank], init: &SyntheticDataset) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty backbone pool".into()));
    }
    if banks.len() != pool.len() {
        return Err(Error::Mismatch(format!(
            "{} backbones but {} stat banks",
            pool.len(),
            banks.len()
        )));
    }
    for (m, b) in pool.iter().zip(banks) {
        if b.backbone != m.name() {
            return Err(Error::Mismatch(format!("bank for `{}` paired with `{}`", b.backbone, m.name())));
        }
        if b.bn_layers().count() != m.bn_count() || b.conv_layers().count() != m.conv_count() {
            return Err(Error::Mismatch(format!("bank layers do not match backbone `{}`", m.name())));
        }
        if m.spec().input != init.image_shape() || m.classes() != init.classes {
            return Err(Error::Mismatch(format!(
                "backbone `{}` takes {:?} / {} classes, distilled set is {:?} / {}",
                m.name(),
                m.spec().input,
                m.classes(),
                init.image_shape(),
                init.classes
            )));
        }
    }
    Ok(())
}

/// Optimizes `init` batch by batch; each step matches one backbone drawn
/// uniformly from `pool`. EMA totals belong to a backbone and persist for
/// the whole run.
pub fn run_synthesis(
    pool: &[Model],
    banks: &[StatBank],
    init: SyntheticDataset,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutcome> {
    cfg.validate()?;
    check_pool(pool, banks, &init)?;
    let plan = BatchPlan::new(cfg.batch_plan, init.classes, init.ipc, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut totals: Vec<EmaTotals> = banks.iter().map(EmaTotals::for_bank).collect();
    let mut data = init;
    let bounds = data.normalization.bounds();
    let mut history = Vec::with_capacity(plan.batches.len() * cfg.iterations);
    let mut draws = vec![0; pool.len()];
    for (bi, idx) in plan.batches.iter().enumerate() {
        let labels = idx.iter().map(|&i| data.labels[i]).collect();
        let mut state = BatchState::new(data.images.select_rows(idx), labels, bounds.clone(), cfg);
        for it in 0..cfg.iterations {
            let lr = if cfg.cosine {
                cosine_lr(cfg.lr, it, cfg.iterations)
            } else {
                cfg.lr
            };
            let k = draw_backbone(&mut rng, pool.len());
            draws[k] += 1;
            let member = Member {
                model: &pool[k],
                bank: &banks[k],
            };
            let mut step = synth_step(&mut state, member, &mut totals[k], cfg, lr, &mut rng)?;
            step.backbone = k;
            if it % 500 == 0 || it + 1 == cfg.iterations {
                debug!(
                    "batch {bi} iter {it}: {} ce={:.4} bn={:.4} conv={:.4} dd={:.4}",
                    pool[k].name(),
                    step.ce,
                    step.bn,
                    step.conv,
                    step.dd
                );
            }
            history.push(step);
        }
        for (row, &i) in idx.iter().enumerate() {
            data.images.row_mut(i).copy_from_slice(state.images.row(row));
        }
        info!("synthesized batch {}/{} ({} images)", bi + 1, plan.batches.len(), idx.len());
    }
    Ok(SynthesisOutcome { data, history, draws })
}
