use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-time view augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    /// Identity view.
    None,
    /// Random crop from a zero-padded image plus a random horizontal flip.
    #[default]
    CropFlip,
}

/// Zero padding on each side for [`Augment::CropFlip`].
pub const CROP_PAD: i64 = 2;

/// One concrete augmentation: a translation and an optional mirror.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct View {
    pub dy: i64,
    pub dx: i64,
    pub flip: bool,
}

impl View {
    pub fn draw<R: Rng>(aug: Augment, rng: &mut R) -> View {
        match aug {
            Augment::None => View::default(),
            Augment::CropFlip => View {
                dy: rng.random_range(-CROP_PAD..=CROP_PAD),
                dx: rng.random_range(-CROP_PAD..=CROP_PAD),
                flip: rng.random_bool(0.5),
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == View::default()
    }
}

/// Applies `view` to one `[c, h, w]` image; pixels shifted in from outside are 0.
pub fn augment_image(image: &[f64], shape: [usize; 3], view: View) -> Vec<f64> {
    if view.is_identity() {
        return image.to_vec();
    }
    let [c, h, w] = shape;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 + view.dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let fx = if view.flip { w - 1 - x } else { x };
                let sx = fx as i64 + view.dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}
