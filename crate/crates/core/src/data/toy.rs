use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{finish_splits, Splits};
use crate::engine::Array;
use crate::error::Result;

/// Per-pixel noise scale of blobs-2.
pub const BLOBS_SIGMA: f64 = 0.05;
const BLOBS_SIDE: usize = 8;
const BLOBS_HALF_GAP: f64 = 4.0 * BLOBS_SIGMA;
/// Noise projected on the class axis stays within this many sigmas.
const BLOBS_MAX_PROJ: f64 = 3.0;

/// Two Gaussian blobs on 1×8×8 images whose means are 8σ apart.
///
/// Samples are redrawn until their noise along the mean-difference axis is
/// within 3σ, so the classes are linearly separable with margin 2σ.
pub fn blobs2(seed: u64) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = BLOBS_SIDE * BLOBS_SIDE;
    let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);

    let mut draw = |per_class: usize| {
        let mut data = Vec::with_capacity(2 * per_class * d);
        let mut labels = Vec::with_capacity(2 * per_class);
        for i in 0..2 * per_class {
            let y = i % 2;
            let sign = if y == 0 { -1.0 } else { 1.0 };
            let z = loop {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let proj: f64 = z.iter().zip(&u).map(|(a, b)| a * b).sum();
                if proj.abs() <= BLOBS_MAX_PROJ {
                    break z;
                }
            };
            data.extend(
                z.iter()
                    .zip(&u)
                    .map(|(z, u)| 0.5 + sign * BLOBS_HALF_GAP * u + BLOBS_SIGMA * z),
            );
            labels.push(y);
        }
        let images = Array::new(vec![2 * per_class, 1, BLOBS_SIDE, BLOBS_SIDE], data)
            .expect("blob shape");
        (images, labels)
    };
    let (train, train_labels) = draw(200);
    let (test, test_labels) = draw(50);
    finish_splits("blobs-2", train, train_labels, test, test_labels, 2)
}

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];
const DIGIT_SIDE: usize = 16;

fn glyph_at(digit: usize, u: f64, v: f64) -> f64 {
    // Bilinear sample with cell centers at integer + 0.5 and zero outside.
    let cell = |x: i64, y: i64| -> f64 {
        if (0..5).contains(&x) && (0..7).contains(&y) {
            f64::from(GLYPHS[digit][y as usize].as_bytes()[x as usize] == b'1')
        } else {
            0.0
        }
    };
    let (fu, fv) = (u - 0.5, v - 0.5);
    let (x0, y0) = (fu.floor(), fv.floor());
    let (tx, ty) = (fu - x0, fv - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    cell(x0, y0) * (1.0 - tx) * (1.0 - ty)
        + cell(x0 + 1, y0) * tx * (1.0 - ty)
        + cell(x0, y0 + 1) * (1.0 - tx) * ty
        + cell(x0 + 1, y0 + 1) * tx * ty
}

fn render_digit(digit: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale: f64 = rng.random_range(1.45..1.85);
    let angle: f64 = rng.random_range(-0.2..0.2);
    let shear: f64 = rng.random_range(-0.15..0.15);
    let (cx, cy) = (
        8.0 + rng.random_range(-1.5..1.5),
        8.0 + rng.random_range(-1.5..1.5),
    );
    let gain: f64 = rng.random_range(0.7..1.0);
    let (sin, cos) = angle.sin_cos();
    let mut img = Vec::with_capacity(DIGIT_SIDE * DIGIT_SIDE);
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let rx = cos * px + sin * py;
            let ry = -sin * px + cos * py;
            let u = (rx - shear * ry) / scale + 2.5;
            let v = ry / scale + 3.5;
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.08;
            img.push((gain * glyph_at(digit, u, v) + noise).clamp(0.0, 1.0));
        }
    }
    img
}

/// Procedural 10-class 16×16 grayscale digits: 200 train and 50 test per class.
pub fn digits16(seed: u64) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |per_class: usize| {
        let n = 10 * per_class;
        let mut data = Vec::with_capacity(n * DIGIT_SIDE * DIGIT_SIDE);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 10;
            data.extend(render_digit(y, &mut rng));
            labels.push(y);
        }
        let images =
            Array::new(vec![n, 1, DIGIT_SIDE, DIGIT_SIDE], data).expect("digit shape");
        (images, labels)
    };
    let (train, train_labels) = draw(200);
    let (test, test_labels) = draw(50);
    finish_splits("digits-16", train, train_labels, test, test_labels, 10)
}
