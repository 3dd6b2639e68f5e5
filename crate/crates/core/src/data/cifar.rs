use std::path::Path;

use super::{finish_splits, ExternalSource, Splits};
use crate::engine::Array;
use crate::error::{Error, Result};

/// One label byte followed by 32×32 pixels in three channel planes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;
const OUT_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Parses CIFAR binary records, rejecting malformed input with its byte offset.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<Vec<CifarRecord>> {
    if bytes.is_empty() {
        return Err(Error::corrupt(path, "no records"));
    }
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let offset = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(Error::corrupt(
            path,
            format!(
                "truncated record at byte offset {offset} ({} of {CIFAR_RECORD_LEN} bytes)",
                bytes.len() - offset
            ),
        ));
    }
    bytes
        .chunks(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::corrupt(
                    path,
                    format!("label {} at byte offset {}", rec[0], i * CIFAR_RECORD_LEN),
                ));
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

fn read_split(files: &[std::path::PathBuf], per_class: usize) -> Result<(Array, Vec<usize>)> {
    let mut counts = [0usize; CIFAR_CLASSES];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        for rec in parse_cifar_records(&bytes, path)? {
            let y = rec.label as usize;
            if per_class > 0 && counts[y] >= per_class {
                continue;
            }
            counts[y] += 1;
            labels.push(y);
            for ch in 0..3 {
                let plane = &rec.pixels[ch * 1024..(ch + 1) * 1024];
                for oy in 0..OUT_SIDE {
                    for ox in 0..OUT_SIDE {
                        let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(dy, dx)| u32::from(plane[(2 * oy + dy) * 32 + 2 * ox + dx]))
                            .sum();
                        data.push(f64::from(s) / (4.0 * 255.0));
                    }
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Config("cifar-subset split has no images".into()));
    }
    let n = labels.len();
    Ok((Array::new(vec![n, 3, OUT_SIDE, OUT_SIDE], data)?, labels))
}

/// CIFAR-10 binary files downscaled 2×2 to 3×16×16.
pub fn load_cifar_subset(src: &ExternalSource) -> Result<Splits> {
    if src.train_files.is_empty() || src.test_files.is_empty() {
        return Err(Error::Config(
            "cifar-subset needs at least one train and one test file".into(),
        ));
    }
    let (train, train_labels) = read_split(&src.train_files, src.per_class)?;
    let (test, test_labels) = read_split(&src.test_files, src.per_class)?;
    finish_splits(
        "cifar-subset",
        train,
        train_labels,
        test,
        test_labels,
        CIFAR_CLASSES,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_input_reports_offset() {
        let bytes = vec![0u8; CIFAR_RECORD_LEN * 2 + 10];
        let err = parse_cifar_records(&bytes, Path::new("b.bin")).unwrap_err();
        assert!(err.to_string().contains(&format!("offset {}", 2 * CIFAR_RECORD_LEN)));
    }

    #[test]
    fn bad_label_reports_offset() {
        let mut bytes = vec![0u8; CIFAR_RECORD_LEN * 3];
        bytes[CIFAR_RECORD_LEN] = 12;
        let err = parse_cifar_records(&bytes, Path::new("b.bin")).unwrap_err();
        assert!(err.to_string().contains(&format!("label 12 at byte offset {CIFAR_RECORD_LEN}")));
    }
}
