//! Global statistics of pretrained backbones: batch-norm running statistics
//! and convolution channel/patch statistics captured in one gradient-free pass.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, Model};
use crate::blob::{create_dir, read_blob, read_toml, write_blob, write_toml, Dtype};
use crate::data::{Fingerprint, LabeledSet};
use crate::engine::{Array, Tape};
use crate::error::{Error, Result};

/// Patch cell size used when none is configured.
pub const DEFAULT_N_P: usize = 4;
/// Images per capture batch; matches the synthesis batch size.
pub const DEFAULT_CAPTURE_BATCH: usize = 50;
pub const BANK_MANIFEST: &str = "manifest.toml";
const FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Bn,
    Conv,
}

/// Statistics of one batch-norm layer or convolution tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub kind: LayerKind,
    /// Index among layers of the same kind (batch-norm order or conv tap order).
    pub local: usize,
    pub channel_mean: Vec<f64>,
    pub channel_var: Vec<f64>,
    /// `[⌈H/n_p⌉, ⌈W/n_p⌉]` maps; convolution layers only.
    pub patch_mean: Option<Array>,
    pub patch_var: Option<Array>,
}

/// All statistics of one backbone, tied to the dataset they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct StatBank {
    pub backbone: String,
    /// Batch-norm layers first, then convolution taps.
    pub layers: Vec<LayerStats>,
    pub fingerprint: Fingerprint,
    pub n_p: usize,
}

impl StatBank {
    pub fn bn_layers(&self) -> impl Iterator<Item = &LayerStats> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Bn)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerStats> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv)
    }

    /// Describes how `expected` differs from the recorded dataset, if it does.
    pub fn fingerprint_mismatch(&self, expected: &Fingerprint) -> Option<String> {
        (self.fingerprint != *expected).then(|| {
            format!(
                "stat bank for {} was captured on {} images / {} classes (sha256 {}), \
                 requested dataset has {} images / {} classes (sha256 {})",
                self.backbone,
                self.fingerprint.size,
                self.fingerprint.classes,
                self.fingerprint.sha256,
                expected.size,
                expected.classes,
                expected.sha256
            )
        })
    }
}

fn check_n_p(n_p: usize, h: usize, w: usize) -> Result<()> {
    if n_p == 0 || n_p > h.max(w) {
        return Err(Error::InvalidArgument(format!(
            "patch size {n_p} outside 1..={} for a {h}x{w} map",
            h.max(w)
        )));
    }
    Ok(())
}

/// Patch mean and variance maps of `feature: [B, C, H, W]` on `n_p×n_p` cells.
pub fn patch_reduce(feature: &Array, n_p: usize) -> Result<(Array, Array)> {
    if feature.ndim() != 4 {
        return Err(Error::shape("patch_reduce", format!("{:?} is not 4-D", feature.shape())));
    }
    check_n_p(n_p, feature.shape()[2], feature.shape()[3])?;
    let mut t = Tape::new();
    let x = t.constant(feature.clone());
    let pm = t.patch_mean(x, n_p)?;
    let pv = t.patch_var(x, n_p)?;
    Ok((t.value(pm).clone(), t.value(pv).clone()))
}

/// Per-batch statistics of every convolution tap, in tap order.
fn batch_conv_stats(model: &Model, images: Array, n_p: usize) -> Result<Vec<[Vec<f64>; 4]>> {
    let mut t = Tape::new();
    let x = t.constant(images);
    let f = model.forward(&mut t, x, Mode::Eval, false)?;
    let mut out = Vec::with_capacity(f.conv_taps.len());
    for &tap in &f.conv_taps {
        let cm = t.mean_axes(tap, &[0, 2, 3])?;
        let cv = t.var_axes(tap, &[0, 2, 3])?;
        let pm = t.patch_mean(tap, n_p)?;
        let pv = t.patch_var(tap, n_p)?;
        out.push([cm, cv, pm, pv].map(|v| t.value(v).data().to_vec()));
    }
    Ok(out)
}

/// Convolution statistics averaged over the batches of a fixed partition of
/// `data` into consecutive chunks of `batch_size` images.
///
/// Each statistic is the arithmetic mean of per-batch statistics. Batches are
/// evaluated in parallel and reduced in batch order.
pub fn capture_conv_stats(model: &Model, data: &LabeledSet, n_p: usize, batch_size: usize) -> Result<Vec<LayerStats>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("capture on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("capture batch size must be >= 1".into()));
    }
    for s in model.conv_shapes() {
        check_n_p(n_p, s.height, s.width)?;
    }
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(batch_size).collect();
    let per_batch: Vec<Result<Vec<[Vec<f64>; 4]>>> = starts
        .par_iter()
        .map(|&s| batch_conv_stats(model, data.images.slice_rows(s, (s + batch_size).min(n)), n_p))
        .collect();
    let mut sums: Option<Vec<[Vec<f64>; 4]>> = None;
    for stats in per_batch {
        let stats = stats?;
        match sums.as_mut() {
            None => sums = Some(stats),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&stats) {
                    for (af, bf) in a.iter_mut().zip(b) {
                        af.iter_mut().zip(bf).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
    let count = starts.len() as f64;
    let sums = sums.expect("at least one batch");
    sums.into_iter()
        .zip(model.conv_shapes())
        .enumerate()
        .map(|(local, ([cm, cv, pm, pv], shape))| {
            let grid = vec![shape.height.div_ceil(n_p), shape.width.div_ceil(n_p)];
            let avg = |v: Vec<f64>| v.into_iter().map(|x| x / count).collect::<Vec<f64>>();
            Ok(LayerStats {
                kind: LayerKind::Conv,
                local,
                channel_mean: avg(cm),
                channel_var: avg(cv),
                patch_mean: Some(Array::new(grid.clone(), avg(pm))?),
                patch_var: Some(Array::new(grid, avg(pv))?),
            })
        })
        .collect()
}

/// Full bank: the model's batch-norm running statistics followed by captured
/// convolution statistics.
pub fn capture_bank(model: &Model, data: &LabeledSet, n_p: usize, batch_size: usize) -> Result<StatBank> {
    let mut layers: Vec<LayerStats> = model
        .running()
        .iter()
        .enumerate()
        .map(|(local, r)| LayerStats {
            kind: LayerKind::Bn,
            local,
            channel_mean: r.mean.clone(),
            channel_var: r.var.clone(),
            patch_mean: None,
            patch_var: None,
        })
        .collect();
    layers.extend(capture_conv_stats(model, data, n_p, batch_size)?);
    Ok(StatBank {
        backbone: model.name().to_string(),
        layers,
        fingerprint: data.fingerprint(),
        n_p,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    index: usize,
    kind: LayerKind,
    local: usize,
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_grid: Option<[usize; 2]>,
    /// Content hash of each blob, keyed by family (`cm`, `cv`, `pm`, `pv`).
    sha256: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    format: u32,
    backbone: String,
    n_p: usize,
    dtype: Dtype,
    fingerprint: Fingerprint,
    layers: Vec<LayerEntry>,
}

fn blob_path(dir: &Path, index: usize, family: &str) -> std::path::PathBuf {
    dir.join(format!("l{index}.{family}.bin"))
}

/// Writes `bank` to `dir`; [`Dtype::F64`] storage round-trips bitwise.
pub fn save_bank(bank: &StatBank, dir: &Path, dtype: Dtype) -> Result<()> {
    create_dir(dir)?;
    let mut layers = Vec::with_capacity(bank.layers.len());
    for (index, l) in bank.layers.iter().enumerate() {
        let mut sha256 = std::collections::BTreeMap::new();
        let mut families: Vec<(&str, &[f64])> = vec![("cm", &l.channel_mean), ("cv", &l.channel_var)];
        if let (Some(pm), Some(pv)) = (&l.patch_mean, &l.patch_var) {
            families.push(("pm", pm.data()));
            families.push(("pv", pv.data()));
        }
        for (family, data) in families {
            let h = write_blob(&blob_path(dir, index, family), data, dtype)?;
            sha256.insert(family.to_string(), h);
        }
        layers.push(LayerEntry {
            index,
            kind: l.kind,
            local: l.local,
            channels: l.channel_mean.len(),
            patch_grid: l.patch_mean.as_ref().map(|p| [p.shape()[0], p.shape()[1]]),
            sha256,
        });
    }
    let manifest = BankManifest {
        format: FORMAT,
        backbone: bank.backbone.clone(),
        n_p: bank.n_p,
        dtype,
        fingerprint: bank.fingerprint.clone(),
        layers,
    };
    write_toml(&dir.join(BANK_MANIFEST), &manifest)
}

/// Loads a bank written by [`save_bank`], rejecting a different backbone and
/// any blob whose size or hash disagrees with the manifest.
pub fn load_bank(dir: &Path, expected_backbone: &str) -> Result<StatBank> {
    let mpath = dir.join(BANK_MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact {
            stage: "capture-stats",
            path: mpath,
        });
    }
    let m: BankManifest = read_toml(&mpath)?;
    if m.format != FORMAT {
        return Err(Error::corrupt(&mpath, format!("unsupported format {}", m.format)));
    }
    if m.backbone != expected_backbone {
        return Err(Error::Mismatch(format!(
            "{} holds statistics for `{}`, expected `{expected_backbone}`",
            dir.display(),
            m.backbone
        )));
    }
    let mut layers = Vec::with_capacity(m.layers.len());
    for (pos, e) in m.layers.iter().enumerate() {
        if e.index != pos {
            return Err(Error::corrupt(&mpath, format!("layer {pos} listed with index {}", e.index)));
        }
        let read = |family: &str, len: usize| -> Result<Vec<f64>> {
            let sha = e.sha256.get(family).ok_or_else(|| {
                Error::corrupt(&mpath, format!("layer {pos} has no `{family}` hash"))
            })?;
            read_blob(&blob_path(dir, pos, family), len, m.dtype, Some(sha))
        };
        let (patch_mean, patch_var) = match (e.kind, e.patch_grid) {
            (LayerKind::Conv, Some([gh, gw])) => (
                Some(Array::new(vec![gh, gw], read("pm", gh * gw)?)?),
                Some(Array::new(vec![gh, gw], read("pv", gh * gw)?)?),
            ),
            (LayerKind::Bn, None) => (None, None),
            _ => {
                return Err(Error::corrupt(
                    &mpath,
                    format!("layer {pos}: patch grid inconsistent with kind"),
                ))
            }
        };
        layers.push(LayerStats {
            kind: e.kind,
            local: e.local,
            channel_mean: read("cm", e.channels)?,
            channel_var: read("cv", e.channels)?,
            patch_mean,
            patch_var,
        });
    }
    Ok(StatBank {
        backbone: m.backbone,
        layers,
        fingerprint: m.fingerprint,
        n_p: m.n_p,
    })
}
