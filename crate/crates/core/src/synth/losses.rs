//! Matching and densification losses of the recover phase.

use rand::Rng;

use crate::backbone::BnTap;
use crate::engine::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::stats::{LayerStats, StatBank};

/// Running total of one statistic across all past batches.
///
/// Empty until first use, then seeded with that batch's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaStat(Option<Vec<f64>>);

impl EmaStat {
    pub fn value(&self) -> Option<&[f64]> {
        self.0.as_deref()
    }

    /// `total ← α·total + (1 − α)·current`; returns the new total.
    pub fn update(&mut self, current: &[f64], alpha: f64) -> &[f64] {
        match &mut self.0 {
            Some(total) if total.len() == current.len() => {
                for (t, &c) in total.iter_mut().zip(current) {
                    *t = alpha * *t + (1.0 - alpha) * c;
                }
            }
            slot => *slot = Some(current.to_vec()),
        }
        self.0.as_deref().expect("set above")
    }
}

/// Statistic families matched at every convolution tap, in draw order.
pub const CONV_FAMILIES: [&str; 4] = ["channel-mean", "channel-var", "patch-mean", "patch-var"];

/// EMA totals of one backbone: `[mean, var]` per batch-norm layer and one
/// entry per family of [`CONV_FAMILIES`] per convolution tap.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaTotals {
    pub bn: Vec<[EmaStat; 2]>,
    pub conv: Vec<[EmaStat; 4]>,
}

impl EmaTotals {
    pub fn new(bn_layers: usize, conv_layers: usize) -> Self {
        EmaTotals {
            bn: vec![Default::default(); bn_layers],
            conv: vec![Default::default(); conv_layers],
        }
    }

    pub fn for_bank(bank: &StatBank) -> Self {
        EmaTotals::new(bank.bn_layers().count(), bank.conv_layers().count())
    }
}

/// `‖s − target − stop_grad(s − total)‖₂` after folding `s` into `total`.
///
/// The value is `‖total − target‖`; the gradient reaches `s` along the unit
/// vector of `total − target`.
pub fn sds_term(tape: &mut Tape, stat: Var, target: &[f64], total: &mut EmaStat, alpha: f64) -> Result<Var> {
    let shape = tape.value(stat).shape().to_vec();
    if tape.value(stat).len() != target.len() {
        return Err(Error::shape(
            "sds_term",
            format!("statistic of {} values against a target of {}", tape.value(stat).len(), target.len()),
        ));
    }
    let current = tape.value(stat).data().to_vec();
    let total = total.update(&current, alpha).to_vec();
    let target = tape.constant(Array::new(shape.clone(), target.to_vec())?);
    let total = tape.constant(Array::new(shape, total)?);
    let diff = tape.sub(stat, target)?;
    let lag = tape.sub(stat, total)?;
    let lag = tape.stop_grad(lag);
    let inner = tape.sub(diff, lag)?;
    Ok(tape.norm(inner))
}

/// `‖s − target‖₂`.
pub fn plain_term(tape: &mut Tape, stat: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.value(stat).shape().to_vec();
    let target = tape.constant(Array::new(shape, target.to_vec()).map_err(|_| {
        Error::shape("plain_term", format!("target of {} values", target.len()))
    })?);
    let diff = tape.sub(stat, target)?;
    Ok(tape.norm(diff))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Array::scalar(0.0))
}

fn sum_terms(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(zero(tape)),
    };
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn check_count(what: &str, taps: usize, bank: usize, totals: usize) -> Result<()> {
    if taps != bank || totals != bank {
        return Err(Error::Mismatch(format!(
            "{what}: {taps} taps, {bank} bank layers, {totals} EMA slots"
        )));
    }
    Ok(())
}

/// Batch-norm matching in stop-gradient form, summed over layers.
pub fn sds_bn_loss(tape: &mut Tape, taps: &[BnTap], bank: &StatBank, totals: &mut EmaTotals, alpha: f64) -> Result<Var> {
    let layers: Vec<&LayerStats> = bank.bn_layers().collect();
    check_count("batch-norm matching", taps.len(), layers.len(), totals.bn.len())?;
    let mut terms = Vec::with_capacity(2 * taps.len());
    for ((tap, l), [tm, tv]) in taps.iter().zip(layers).zip(totals.bn.iter_mut()) {
        terms.push(sds_term(tape, tap.mean, &l.channel_mean, tm, alpha)?);
        terms.push(sds_term(tape, tap.var, &l.channel_var, tv, alpha)?);
    }
    sum_terms(tape, terms)
}

/// Batch-norm matching against the current batch only.
pub fn bn_loss(tape: &mut Tape, taps: &[BnTap], bank: &StatBank) -> Result<Var> {
    let layers: Vec<&LayerStats> = bank.bn_layers().collect();
    check_count("batch-norm matching", taps.len(), layers.len(), layers.len())?;
    let mut terms = Vec::with_capacity(2 * taps.len());
    for (tap, l) in taps.iter().zip(layers) {
        terms.push(plain_term(tape, tap.mean, &l.channel_mean)?);
        terms.push(plain_term(tape, tap.var, &l.channel_var)?);
    }
    sum_terms(tape, terms)
}

/// Which (layer, family) terms are dropped this iteration; `true` = dropped.
///
/// Draws one uniform per term in layer-then-family order.
pub fn drop_mask<R: Rng + ?Sized>(rng: &mut R, layers: usize, beta_dr: f64) -> Vec<[bool; 4]> {
    (0..layers)
        .map(|_| std::array::from_fn(|_| rng.random::<f64>() < beta_dr))
        .collect()
}

fn conv_stat(tape: &mut Tape, tap: Var, family: usize, n_p: usize) -> Result<Var> {
    match family {
        0 => tape.mean_axes(tap, &[0, 2, 3]),
        1 => tape.var_axes(tap, &[0, 2, 3]),
        2 => tape.patch_mean(tap, n_p),
        _ => tape.patch_var(tap, n_p),
    }
}

fn conv_target(l: &LayerStats, family: usize) -> Result<&[f64]> {
    let patch = match family {
        0 => return Ok(&l.channel_mean),
        1 => return Ok(&l.channel_var),
        2 => l.patch_mean.as_ref(),
        _ => l.patch_var.as_ref(),
    };
    patch
        .map(Array::data)
        .ok_or_else(|| Error::InvalidArgument(format!("conv layer {} has no patch statistics", l.local)))
}

/// Outcome of [`sds_conv_loss`].
#[derive(Clone, Debug)]
pub struct ConvMatch {
    pub loss: Var,
    pub dropped: Vec<[bool; 4]>,
}

/// Convolution matching in stop-gradient form over all four statistic
/// families; each term is independently dropped with probability `beta_dr`,
/// and a dropped term leaves its EMA total untouched.
pub fn sds_conv_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    taps: &[Var],
    bank: &StatBank,
    totals: &mut EmaTotals,
    alpha: f64,
    beta_dr: f64,
    rng: &mut R,
) -> Result<ConvMatch> {
    let layers: Vec<&LayerStats> = bank.conv_layers().collect();
    check_count("conv matching", taps.len(), layers.len(), totals.conv.len())?;
    let dropped = drop_mask(rng, layers.len(), beta_dr);
    let mut terms = Vec::new();
    for (((&tap, l), slots), mask) in taps.iter().zip(layers).zip(totals.conv.iter_mut()).zip(&dropped) {
        for (family, slot) in slots.iter_mut().enumerate() {
            if mask[family] {
                continue;
            }
            let stat = conv_stat(tape, tap, family, bank.n_p)?;
            terms.push(sds_term(tape, stat, conv_target(l, family)?, slot, alpha)?);
        }
    }
    Ok(ConvMatch {
        loss: sum_terms(tape, terms)?,
        dropped,
    })
}

/// Convolution matching against the current batch only, all terms kept.
pub fn conv_loss(tape: &mut Tape, taps: &[Var], bank: &StatBank) -> Result<Var> {
    let layers: Vec<&LayerStats> = bank.conv_layers().collect();
    check_count("conv matching", taps.len(), layers.len(), layers.len())?;
    let mut terms = Vec::new();
    for (&tap, l) in taps.iter().zip(layers) {
        for family in 0..4 {
            let stat = conv_stat(tape, tap, family, bank.n_p)?;
            terms.push(plain_term(tape, stat, conv_target(l, family)?)?);
        }
    }
    sum_terms(tape, terms)
}

/// Largest spatial side fed to the densification Gram matrix.
pub const DD_MAX_SIDE: usize = 32;

/// Densification loss of a batch `x: [B, C, H, W]`.
///
/// Per class with at least two samples: eigenvalues `Σ` of the Gram matrix of
/// flattened (downsampled) images, then `KL(stop_grad(softmax(Σ/τ)) ‖ softmax(Σ))`.
pub fn dd_loss(tape: &mut Tape, x: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("densification temperature {tau} must be > 0")));
    }
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(Error::shape(
            "dd_loss",
            format!("images {s:?} with {} labels", labels.len()),
        ));
    }
    let x = if s[2] > DD_MAX_SIDE || s[3] > DD_MAX_SIDE {
        tape.adaptive_avg_pool2d(x, s[2].min(DD_MAX_SIDE), s[3].min(DD_MAX_SIDE))?
    } else {
        x
    };
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut terms = Vec::new();
    for y in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if idx.len() < 2 {
            continue;
        }
        let xs = tape.select_rows(x, &idx)?;
        let flat = tape.flatten(xs)?;
        let flat_t = tape.transpose(flat)?;
        let gram = tape.matmul(flat, flat_t)?;
        let spectrum = tape.eigvals_sym(gram)?;
        let soft = tape.scale(spectrum, 1.0 / tau);
        let p = tape.softmax(soft)?;
        let p = tape.stop_grad(p);
        let log_q = tape.log_softmax(spectrum)?;
        terms.push(tape.kl_div(p, log_q)?);
    }
    sum_terms(tape, terms)
}
