//! Labeled image sets, built-in toy generators and external ingestion.

mod augment;
mod cifar;
mod toy;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::Array;
use crate::error::{Error, Result};

pub use augment::{augment_image, Augment, View};
pub use cifar::{load_cifar_subset, parse_cifar_records, CifarRecord, CIFAR_RECORD_LEN};
pub use toy::{blobs2, digits16, BLOBS_SIGMA};

/// Per-channel affine map from raw `[0, 1]` pixels to model input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and (population) standard deviation of raw images.
    pub fn fit(raw: &Array) -> Self {
        let s = raw.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                for &v in &raw.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(1e-12).sqrt()
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, raw: &mut Array) {
        self.map(raw, |v, m, s| (v - m) / s);
    }

    pub fn invert(&self, normalized: &mut Array) {
        self.map(normalized, |v, m, s| v * s + m);
    }

    /// Model-space bounds of each channel corresponding to raw `[0, 1]`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| (-m / s, (1.0 - m) / s))
            .collect()
    }

    fn map(&self, x: &mut Array, f: impl Fn(f64, f64, f64) -> f64) {
        let s = x.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (k, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let ch = k % c;
            chunk
                .iter_mut()
                .for_each(|v| *v = f(*v, self.mean[ch], self.std[ch]));
        }
    }
}

/// Identity of a dataset: size, class count and content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub size: usize,
    pub classes: usize,
    pub sha256: String,
}

/// Images `[N, C, H, W]` in model space with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Array,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(images: Array, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled_set",
                format!("{:?} images with {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside {classes} classes"
            )));
        }
        Ok(LabeledSet {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Indices of the images of class `y`, in dataset order.
    pub fn class_indices(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u32).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        Fingerprint {
            size: self.len(),
            classes: self.classes,
            sha256: hex::encode(h.finalize()),
        }
    }

    /// Content hash of each image, for disjointness checks.
    pub fn image_hashes(&self) -> Vec<[u8; 32]> {
        (0..self.len())
            .map(|i| {
                let mut h = Sha256::new();
                for v in self.images.row(i) {
                    h.update(v.to_le_bytes());
                }
                h.finalize().into()
            })
            .collect()
    }
}

/// Train and held-out test splits sharing one normalization.
#[derive(Clone, Debug)]
pub struct Splits {
    pub name: String,
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub normalization: Normalization,
}

/// Built-in dataset names.
pub const DATASETS: &[&str] = &["blobs-2", "digits-16", "cifar-subset"];

/// Where the external `cifar-subset` data lives and how much of it to use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSource {
    pub train_files: Vec<std::path::PathBuf>,
    pub test_files: Vec<std::path::PathBuf>,
    /// Keep at most this many images per class per split (0 keeps all).
    #[serde(default)]
    pub per_class: usize,
}

/// Deterministic train/test splits for a named dataset.
pub fn load_dataset(name: &str, seed: u64, external: Option<&ExternalSource>) -> Result<Splits> {
    match name {
        "blobs-2" => blobs2(seed),
        "digits-16" => digits16(seed),
        "cifar-subset" => {
            let src = external.ok_or_else(|| {
                Error::Config("cifar-subset needs [dataset.external] train_files/test_files".into())
            })?;
            load_cifar_subset(src)
        }
        other => Err(Error::Config(format!(
            "unknown dataset `{other}` (expected one of {DATASETS:?})"
        ))),
    }
}

/// Normalizes raw splits with statistics fitted on the training split.
pub(crate) fn finish_splits(
    name: &str,
    mut train_raw: Array,
    train_labels: Vec<usize>,
    mut test_raw: Array,
    test_labels: Vec<usize>,
    classes: usize,
) -> Result<Splits> {
    let normalization = Normalization::fit(&train_raw);
    normalization.apply(&mut train_raw);
    normalization.apply(&mut test_raw);
    Ok(Splits {
        name: name.to_string(),
        train: LabeledSet::new(train_raw, train_labels, classes)?,
        test: LabeledSet::new(test_raw, test_labels, classes)?,
        normalization,
    })
}
