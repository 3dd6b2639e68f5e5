use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::SyntheticDataset;
use crate::blob::{create_dir, read_blob, read_bytes, read_toml, sha256_hex, write_blob, write_bytes, write_toml, Dtype};
use crate::data::Normalization;
use crate::engine::Array;
use crate::error::{Error, Result};

pub const DISTILLED_MANIFEST: &str = "manifest.toml";
const FORMAT: u32 = 1;
const IMAGES: &str = "images.bin";
const LABELS: &str = "labels.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    ipc: usize,
    classes: usize,
    /// `[channels, height, width]`.
    shape: [usize; 3],
    normalization: Normalization,
    images_sha256: String,
    labels_sha256: String,
}

/// Writes the distilled set plus one 8-bit preview strip per class.
pub fn save_synthetic(data: &SyntheticDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let images_sha256 = write_blob(&dir.join(IMAGES), data.images.data(), Dtype::F64)?;
    let labels: Vec<u8> = data.labels.iter().flat_map(|&y| (y as u32).to_le_bytes()).collect();
    write_bytes(&dir.join(LABELS), &labels)?;
    let manifest = Manifest {
        format: FORMAT,
        ipc: data.ipc,
        classes: data.classes,
        shape: data.image_shape(),
        normalization: data.normalization.clone(),
        images_sha256,
        labels_sha256: sha256_hex(&labels),
    };
    write_toml(&dir.join(DISTILLED_MANIFEST), &manifest)?;
    write_previews(data, &dir.join("preview"))
}

/// Loads a set written by [`save_synthetic`], verifying both blobs.
pub fn load_synthetic(dir: &Path) -> Result<SyntheticDataset> {
    let mpath = dir.join(DISTILLED_MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact {
            stage: "synthesize",
            path: mpath,
        });
    }
    let m: Manifest = read_toml(&mpath)?;
    if m.format != FORMAT {
        return Err(Error::corrupt(&mpath, format!("unsupported format {}", m.format)));
    }
    let n = m.ipc * m.classes;
    let [c, h, w] = m.shape;
    let images = read_blob(&dir.join(IMAGES), n * c * h * w, Dtype::F64, Some(&m.images_sha256))?;
    let lpath = dir.join(LABELS);
    let bytes = read_bytes(&lpath)?;
    if bytes.len() != 4 * n {
        return Err(Error::corrupt(&lpath, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
    }
    if sha256_hex(&bytes) != m.labels_sha256 {
        return Err(Error::corrupt(&lpath, "content hash differs from manifest"));
    }
    let labels: Vec<usize> = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte chunk")) as usize)
        .collect();
    if let Some(bad) = labels.iter().find(|&&y| y >= m.classes) {
        return Err(Error::corrupt(&lpath, format!("label {bad} >= {} classes", m.classes)));
    }
    Ok(SyntheticDataset {
        images: Array::new(vec![n, c, h, w], images)?,
        labels,
        ipc: m.ipc,
        classes: m.classes,
        normalization: m.normalization,
    })
}

/// Content hash of the stored image blob, for downstream fingerprint checks.
pub fn distilled_hash(dir: &Path) -> Result<String> {
    let mpath = dir.join(DISTILLED_MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact {
            stage: "synthesize",
            path: mpath,
        });
    }
    let m: Manifest = read_toml(&mpath)?;
    Ok(m.images_sha256)
}

/// One binary PGM (gray) or PPM (color) strip of a class's images, 1-pixel gaps.
fn write_previews(data: &SyntheticDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let [c, h, w] = data.image_shape();
    let mut raw = data.images.clone();
    data.normalization.invert(&mut raw);
    let per = data.ipc;
    let width = per * (w + 1) - 1;
    for y in 0..data.classes {
        let mut pixels = vec![0u8; h * width * if c == 3 { 3 } else { 1 }];
        for j in 0..per {
            let img = raw.row(y * per + j);
            for r in 0..h {
                for col in 0..w {
                    let x = j * (w + 1) + col;
                    let q = |ch: usize| (img[(ch * h + r) * w + col].clamp(0.0, 1.0) * 255.0).round() as u8;
                    if c == 3 {
                        for ch in 0..3 {
                            pixels[(r * width + x) * 3 + ch] = q(ch);
                        }
                    } else {
                        pixels[r * width + x] = q(0);
                    }
                }
            }
        }
        let (magic, ext) = if c == 3 { ("P6", "ppm") } else { ("P5", "pgm") };
        let mut bytes = format!("{magic}\n{width} {h}\n255\n").into_bytes();
        bytes.extend(pixels);
        write_bytes(&dir.join(format!("class_{y}.{ext}")), &bytes)?;
    }
    Ok(())
}
