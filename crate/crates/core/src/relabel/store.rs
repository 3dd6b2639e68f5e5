use std::path::Path;

use sha2::{Digest, Sha256};

use super::{soft_probabilities, LnScope};
use crate::blob::{read_bytes, write_bytes};
use crate::data::Augment;
use crate::error::{Error, Result};

pub const SOFT_LABEL_FILE: &str = "soft_labels.bin";
const MAGIC: &[u8; 4] = b"CDSL";
const VERSION: u32 = 1;
/// magic, version, images, classes, epochs, flags, tau_label, base_seed, record count.
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 1 + 8 + 8 + 8;
const CHECKSUM_LEN: usize = 32;

const FLAG_LN: u8 = 1;
const FLAG_PER_IMAGE: u8 = 2;
const FLAG_CROP_FLIP: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct StoreHeader {
    pub images: usize,
    pub classes: usize,
    pub epochs: usize,
    pub use_ln: bool,
    pub ln_scope: LnScope,
    pub augment: Augment,
    pub tau_label: f64,
    pub base_seed: u64,
}

/// Raw ensemble logits of one augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftRecord {
    pub image: u32,
    pub seed: u64,
    pub logits: Vec<f64>,
}

/// Soft-label records sorted by `(image, seed)`.
///
/// Every image has at least one record and every logit is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelStore {
    header: StoreHeader,
    records: Vec<SoftRecord>,
}

impl SoftLabelStore {
    pub(crate) fn new(header: StoreHeader, mut records: Vec<SoftRecord>) -> Result<Self> {
        records.sort_by_key(|r| (r.image, r.seed));
        check_records(&header, &records).map_err(Error::InvalidArgument)?;
        Ok(SoftLabelStore { header, records })
    }

    pub fn images(&self) -> usize {
        self.header.images
    }

    pub fn classes(&self) -> usize {
        self.header.classes
    }

    /// Relabel epochs, i.e. distinct views recorded per image.
    pub fn epochs(&self) -> usize {
        self.header.epochs
    }

    pub fn use_ln(&self) -> bool {
        self.header.use_ln
    }

    pub fn ln_scope(&self) -> LnScope {
        self.header.ln_scope
    }

    pub fn augment(&self) -> Augment {
        self.header.augment
    }

    pub fn tau_label(&self) -> f64 {
        self.header.tau_label
    }

    /// Seed the per-view augmentation seeds were derived from.
    pub fn base_seed(&self) -> u64 {
        self.header.base_seed
    }

    pub fn records(&self) -> &[SoftRecord] {
        &self.records
    }

    pub fn get(&self, image: usize, seed: u64) -> Option<&[f64]> {
        let key = (image as u32, seed);
        self.records
            .binary_search_by_key(&key, |r| (r.image, r.seed))
            .ok()
            .map(|i| self.records[i].logits.as_slice())
    }

    /// Like [`get`](Self::get) but a missing key is an error naming it.
    pub fn lookup(&self, image: usize, seed: u64) -> Result<&[f64]> {
        self.get(image, seed).ok_or_else(|| {
            Error::Mismatch(format!("soft-label store has no record for image {image}, seed {seed:#018x}"))
        })
    }

    /// `softmax(z̃ / τ_label)` of one record.
    pub fn probabilities(&self, image: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(soft_probabilities(self.lookup(image, seed)?, self.header.tau_label))
    }
}

fn check_records(h: &StoreHeader, records: &[SoftRecord]) -> std::result::Result<(), String> {
    let mut covered = vec![false; h.images];
    for (i, r) in records.iter().enumerate() {
        if r.image as usize >= h.images {
            return Err(format!("record {i} names image {} of {}", r.image, h.images));
        }
        if r.logits.len() != h.classes {
            return Err(format!("record {i} has {} logits, expected {}", r.logits.len(), h.classes));
        }
        if let Some(v) = r.logits.iter().find(|v| !v.is_finite()) {
            return Err(format!("record {i} (image {}, seed {:#018x}) holds logit {v}", r.image, r.seed));
        }
        if i > 0 && (records[i - 1].image, records[i - 1].seed) >= (r.image, r.seed) {
            return Err(format!("record {i} (image {}, seed {:#018x}) is duplicated or out of order", r.image, r.seed));
        }
        covered[r.image as usize] = true;
    }
    match covered.iter().position(|&c| !c) {
        Some(i) => Err(format!("image {i} has no record")),
        None => Ok(()),
    }
}

/// Writes the store as one checksummed little-endian file.
pub fn save_soft_labels(store: &SoftLabelStore, path: &Path) -> Result<()> {
    let h = &store.header;
    let stride = 12 + 8 * h.classes;
    let mut bytes = Vec::with_capacity(HEADER_LEN + store.records.len() * stride + CHECKSUM_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(h.images as u64).to_le_bytes());
    bytes.extend_from_slice(&(h.classes as u32).to_le_bytes());
    bytes.extend_from_slice(&(h.epochs as u32).to_le_bytes());
    let mut flags = 0;
    if h.use_ln {
        flags |= FLAG_LN;
    }
    if h.ln_scope == LnScope::Image {
        flags |= FLAG_PER_IMAGE;
    }
    if h.augment == Augment::CropFlip {
        flags |= FLAG_CROP_FLIP;
    }
    bytes.push(flags);
    bytes.extend_from_slice(&h.tau_label.to_le_bytes());
    bytes.extend_from_slice(&h.base_seed.to_le_bytes());
    bytes.extend_from_slice(&(store.records.len() as u64).to_le_bytes());
    for r in &store.records {
        bytes.extend_from_slice(&r.image.to_le_bytes());
        bytes.extend_from_slice(&r.seed.to_le_bytes());
        for v in &r.logits {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&bytes);
    bytes.extend_from_slice(&sum);
    write_bytes(path, &bytes)
}

/// Little-endian cursor that reports the offset of a short read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked up front");
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Reads a store written by [`save_soft_labels`], rejecting truncation,
/// bit flips and malformed records with the reason.
pub fn load_soft_labels(path: &Path) -> Result<SoftLabelStore> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: "relabel",
            path: path.to_path_buf(),
        });
    }
    let bytes = read_bytes(path)?;
    let bad = |detail: String| Error::corrupt(path, detail);
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:02x?}, not a soft-label store", &bytes[..4])));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32();
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let images = r.u64() as usize;
    let classes = r.u32() as usize;
    let epochs = r.u32() as usize;
    let flags = r.take::<1>()[0];
    let tau_label = r.f64();
    let base_seed = r.u64();
    let count = r.u64() as usize;
    let stride = 12 + 8 * classes;
    let expected = count.checked_mul(stride).and_then(|v| v.checked_add(HEADER_LEN));
    if expected != Some(body.len()) {
        return Err(bad(format!(
            "{count} records of {classes} classes need {} bytes before the checksum, found {}",
            expected.map_or_else(|| "overflowing".to_string(), |v| v.to_string()),
            body.len()
        )));
    }
    if Sha256::digest(body).as_slice() != sum {
        return Err(bad("checksum mismatch".into()));
    }
    if flags & !(FLAG_LN | FLAG_PER_IMAGE | FLAG_CROP_FLIP) != 0 {
        return Err(bad(format!("unknown flag bits {flags:#04x} at offset {}", HEADER_LEN - 25)));
    }
    let header = StoreHeader {
        images,
        classes,
        epochs,
        use_ln: flags & FLAG_LN != 0,
        ln_scope: if flags & FLAG_PER_IMAGE != 0 { LnScope::Image } else { LnScope::Batch },
        augment: if flags & FLAG_CROP_FLIP != 0 { Augment::CropFlip } else { Augment::None },
        tau_label,
        base_seed,
    };
    if !(tau_label > 0.0 && tau_label.is_finite()) {
        return Err(bad(format!("tau_label {tau_label} in header")));
    }
    let records: Vec<SoftRecord> = (0..count)
        .map(|_| SoftRecord {
            image: r.u32(),
            seed: r.u64(),
            logits: (0..classes).map(|_| r.f64()).collect(),
        })
        .collect();
    check_records(&header, &records).map_err(bad)?;
    Ok(SoftLabelStore { header, records })
}
