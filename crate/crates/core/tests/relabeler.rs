mod common;

use std::path::Path;

use common::{randn, rng};
use condense::backbone::{argmax, BackboneSpec, Model};
use condense::data::{Augment, Normalization};
use condense::engine::Array;
use condense::relabel::{
    aug_seed, ensemble_logits, load_soft_labels, relabel_dataset, save_soft_labels, soft_probabilities, LnScope,
    RelabelConfig, SoftLabelStore, SOFT_LABEL_FILE,
};
use condense::synth::SyntheticDataset;
use condense::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn model(name: &str, seed: u64) -> Model {
    Model::build(&BackboneSpec::preset(name, [1, 8, 8], 3).unwrap(), seed).unwrap()
}

/// Multiplies the classifier head, hence every logit, by `c`.
fn scaled(m: &Model, c: f64) -> Model {
    let mut m = m.clone();
    let n = m.params().len();
    for p in &mut m.params_mut()[n - 2..] {
        p.data_mut().iter_mut().for_each(|v| *v *= c);
    }
    m
}

fn distilled(seed: u64, ipc: usize) -> SyntheticDataset {
    SyntheticDataset {
        images: randn(&mut rng(seed), &[3 * ipc, 1, 8, 8]),
        labels: (0..3 * ipc).map(|i| i / ipc).collect(),
        ipc,
        classes: 3,
        normalization: Normalization::identity(1),
    }
}

fn cfg(epochs: usize) -> RelabelConfig {
    RelabelConfig {
        epochs,
        batch_size: 4,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn identical_pool_reproduces_the_single_model() {
    let m = model("tiny-resnet", 1);
    let x = randn(&mut rng(2), &[5, 1, 8, 8]);
    let single = m.predict(&x, 5).unwrap();
    let pool = vec![m.clone(), m.clone(), m];
    for ln in [None, Some(LnScope::Batch), Some(LnScope::Image)] {
        let z = ensemble_logits(&x, &pool, ln).unwrap();
        assert!(z.max_abs_diff(&single) < 1e-12, "{ln:?}");
    }
}

#[test]
fn doubled_member_is_rescaled_to_the_mean_norm() {
    let m = model("tiny-convnet-gn", 3);
    let x = randn(&mut rng(4), &[4, 1, 8, 8]);
    let z1 = m.predict(&x, 4).unwrap();
    let z = ensemble_logits(&x, &[m.clone(), scaled(&m, 2.0)], Some(LnScope::Batch)).unwrap();
    assert!(z.max_abs_diff(&z1.map(|v| 1.5 * v)) < 1e-12);
    let plain = ensemble_logits(&x, &[m.clone(), scaled(&m, 2.0)], None).unwrap();
    assert!(plain.max_abs_diff(&z1.map(|v| 1.5 * v)) < 1e-12);
}

/// `z` divided by its Frobenius norm, over the whole batch or per row.
fn direction(z: &Array, scope: LnScope) -> Array {
    let k = z.shape()[1];
    let mut out = z.clone();
    let groups: Vec<&mut [f64]> = match scope {
        LnScope::Batch => vec![out.data_mut()],
        LnScope::Image => out.data_mut().chunks_mut(k).collect(),
    };
    for g in groups {
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.iter_mut().for_each(|v| *v /= n);
    }
    out
}

#[test]
fn ln_cancels_member_scale() {
    // Under LN each member contributes only its direction; member scales can
    // move the common norm but never the ensemble's direction.
    let (a, b) = (model("tiny-resnet", 5), model("tiny-shuffle", 6));
    let x = randn(&mut rng(7), &[6, 1, 8, 8]);
    for scope in [LnScope::Batch, LnScope::Image] {
        let base = direction(&ensemble_logits(&x, &[a.clone(), b.clone()], Some(scope)).unwrap(), scope);
        for (ca, cb) in [(7.5, 1.0), (3.0, 3.0), (0.2, 40.0)] {
            let z = ensemble_logits(&x, &[scaled(&a, ca), scaled(&b, cb)], Some(scope)).unwrap();
            assert!(direction(&z, scope).max_abs_diff(&base) < 1e-9, "{scope:?} {ca} {cb}");
        }
    }
}

#[test]
fn rescaling_a_member_keeps_its_argmax() {
    let m = model("tiny-resnet", 8);
    let x = randn(&mut rng(9), &[6, 1, 8, 8]);
    let z = m.predict(&x, 6).unwrap();
    let s = scaled(&m, 0.37).predict(&x, 6).unwrap();
    for i in 0..6 {
        assert_eq!(argmax(z.row(i)), argmax(s.row(i)));
    }
}

#[test]
fn ensemble_preconditions() {
    let x = randn(&mut rng(10), &[2, 1, 8, 8]);
    assert!(ensemble_logits(&x, &[], None).is_err());
    let other = Model::build(&BackboneSpec::preset("tiny-resnet", [1, 8, 8], 4).unwrap(), 1).unwrap();
    assert!(matches!(
        ensemble_logits(&x, &[model("tiny-resnet", 1), other.clone()], None),
        Err(Error::Mismatch(_))
    ));
    assert!(matches!(relabel_dataset(&distilled(1, 2), &[other], &cfg(1)), Err(Error::Mismatch(_))));
}

#[test]
fn identity_views_record_raw_ensemble_logits() {
    let pool = vec![model("tiny-resnet", 12), model("tiny-mobile", 13)];
    let data = distilled(14, 4);
    let c = RelabelConfig {
        augment: Augment::None,
        batch_size: 12,
        ..cfg(1)
    };
    let store = relabel_dataset(&data, &pool, &c).unwrap();
    let z = ensemble_logits(&data.images, &pool, Some(LnScope::Batch)).unwrap();
    assert_eq!(store.records().len(), 12);
    for i in 0..12 {
        let seed = aug_seed(c.seed, 0, i);
        assert_eq!(store.get(i, seed).unwrap(), z.row(i));
    }
}

#[test]
fn relabeling_is_deterministic_and_covers_every_view() {
    let pool = vec![model("tiny-resnet", 15), model("tiny-convnet-gn", 16)];
    let data = distilled(17, 3);
    let a = relabel_dataset(&data, &pool, &cfg(3)).unwrap();
    let b = relabel_dataset(&data, &pool, &cfg(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records().len(), 3 * data.len());
    for e in 0..3 {
        for i in 0..data.len() {
            let z = a.lookup(i, aug_seed(11, e, i)).unwrap();
            assert!(z.iter().all(|v| v.is_finite()));
        }
    }
    let err = a.lookup(0, 42).unwrap_err().to_string();
    assert!(err.contains("image 0") && err.contains("0x000000000000002a"), "{err}");
}

fn stored(dir: &Path) -> (SoftLabelStore, std::path::PathBuf) {
    let pool = vec![model("tiny-resnet", 18)];
    let store = relabel_dataset(&distilled(19, 2), &pool, &cfg(2)).unwrap();
    let path = dir.join(SOFT_LABEL_FILE);
    save_soft_labels(&store, &path).unwrap();
    (store, path)
}

fn corrupt_message(path: &Path) -> String {
    match load_soft_labels(path) {
        Err(Error::Corrupt { path: p, detail }) => {
            assert_eq!(p, path);
            detail
        }
        other => panic!("expected a corruption error, got {other:?}"),
    }
}

/// Rewrites the trailing checksum so only the semantic checks can object.
fn reseal(bytes: &mut Vec<u8>) {
    let n = bytes.len() - 32;
    let sum = Sha256::digest(&bytes[..n]);
    bytes[n..].copy_from_slice(&sum);
}

#[test]
fn store_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let (store, path) = stored(dir.path());
    let back = load_soft_labels(&path).unwrap();
    assert_eq!(back, store);
    for r in store.records() {
        assert_eq!(back.get(r.image as usize, r.seed).unwrap(), r.logits.as_slice());
    }
}

#[test]
fn damaged_stores_are_rejected_with_the_reason() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = stored(dir.path());
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    flipped[70] ^= 0x10;
    std::fs::write(&path, &flipped).unwrap();
    assert!(corrupt_message(&path).contains("checksum"));

    std::fs::write(&path, &good[..good.len() - 9]).unwrap();
    assert!(corrupt_message(&path).contains("bytes"));

    let mut magic = good.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(corrupt_message(&path).contains("magic"));

    // A NaN logit in the first record (after u32 image and u64 seed).
    let mut nan = good.clone();
    nan[49 + 12..49 + 20].copy_from_slice(&f64::NAN.to_le_bytes());
    reseal(&mut nan);
    std::fs::write(&path, &nan).unwrap();
    assert!(corrupt_message(&path).contains("record 0"));

    // Image count raised past the records: the last image is uncovered.
    let mut missing = good.clone();
    missing[8..16].copy_from_slice(&7u64.to_le_bytes());
    reseal(&mut missing);
    std::fs::write(&path, &missing).unwrap();
    assert!(corrupt_message(&path).contains("image 6 has no record"));

    let absent = dir.path().join("nowhere.bin");
    assert!(matches!(
        load_soft_labels(&absent),
        Err(Error::MissingArtifact { stage: "relabel", .. })
    ));
}

proptest! {
    #[test]
    fn probability_view_is_normalized(logits in prop::collection::vec(-50.0f64..50.0, 1..12), tau in 0.01f64..100.0) {
        let p = soft_probabilities(&logits, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }
}
