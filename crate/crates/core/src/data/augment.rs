//! Batch augmentation policies.
//!
//! Every policy preserves shape and the [0,1] value range; `none` is the
//! bit-exact identity.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::rng::SeedState;
use crate::ImageBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentPolicy {
    /// Identity.
    None,
    /// Zero-pad by `pad`, crop back to the original size at a random offset,
    /// then flip horizontally with probability 1/2.
    PadCropFlip {
        #[serde(default = "default_pad")]
        pad: usize,
    },
    /// A reduced random-op policy in the autoaugment style: per image, two
    /// ops are drawn from {translate-x, translate-y, brightness, contrast,
    /// cutout} and each applied with probability 0.8. `magnitude` in [0,1]
    /// scales every op's strength.
    Autoaugment {
        #[serde(default = "default_magnitude")]
        magnitude: f64,
    },
}

fn default_pad() -> usize {
    4
}

fn default_magnitude() -> f64 {
    0.5
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        matches!(self, AugmentPolicy::None)
    }
}

/// Apply `policy` independently to every image in the batch.
pub fn augment(batch: &ImageBatch, policy: &AugmentPolicy, rng: &mut SeedState) -> ImageBatch {
    match policy {
        AugmentPolicy::None => batch.clone(),
        AugmentPolicy::PadCropFlip { pad } => {
            let mut out = batch.clone();
            let n = batch.shape()[0];
            for i in 0..n {
                let src = batch.index_axis(ndarray::Axis(0), i);
                let dst = pad_crop_flip(&src, *pad, rng);
                out.index_axis_mut(ndarray::Axis(0), i).assign(&dst);
            }
            out
        }
        AugmentPolicy::Autoaugment { magnitude } => {
            let m = magnitude.clamp(0.0, 1.0);
            let mut out = batch.clone();
            let n = batch.shape()[0];
            for i in 0..n {
                let mut img = batch.index_axis(ndarray::Axis(0), i).to_owned();
                for _ in 0..2 {
                    let op = rng.index(5);
                    if !rng.coin(0.8) {
                        continue;
                    }
                    apply_op(&mut img, op, m, rng);
                }
                out.index_axis_mut(ndarray::Axis(0), i).assign(&img);
            }
            out
        }
    }
}

fn pad_crop_flip(src: &ArrayView3<f64>, pad: usize, rng: &mut SeedState) -> Array3<f64> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let dy = rng.index(2 * pad + 1) as isize - pad as isize;
    let dx = rng.index(2 * pad + 1) as isize - pad as isize;
    let flip = rng.coin(0.5);
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[[ch, y, x]] = src[[ch, sy as usize, sx as usize]];
            }
        }
    }
    out
}

fn apply_op(img: &mut Array3<f64>, op: usize, m: f64, rng: &mut SeedState) {
    let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    match op {
        0 | 1 => {
            // Translation by up to 30% of the image side, zero fill.
            let span = if op == 0 { w } else { h };
            let shift = (rng.uniform_in(-1.0, 1.0) * m * 0.3 * span as f64).round() as isize;
            let (dy, dx) = if op == 0 { (0, shift) } else { (shift, 0) };
            let snapshot = img.clone();
            img.fill(0.0);
            for ch in 0..snapshot.shape()[0] {
                for y in 0..h {
                    let sy = y as isize - dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize - dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        img[[ch, y, x]] = snapshot[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
        2 => {
            let delta = rng.uniform_in(-1.0, 1.0) * 0.3 * m;
            img.mapv_inplace(|v| (v + delta).clamp(0.0, 1.0));
        }
        3 => {
            let factor = 1.0 + rng.uniform_in(-1.0, 1.0) * 0.6 * m;
            img.mapv_inplace(|v| (0.5 + (v - 0.5) * factor).clamp(0.0, 1.0));
        }
        _ => {
            // Cutout: a gray square occluding up to 40% of the short side.
            let side = ((m * 0.4 * h.min(w) as f64).round() as usize).max(1);
            let y0 = rng.index(h.saturating_sub(side) + 1);
            let x0 = rng.index(w.saturating_sub(side) + 1);
            for ch in 0..img.shape()[0] {
                for y in y0..(y0 + side).min(h) {
                    for x in x0..(x0 + side).min(w) {
                        img[[ch, y, x]] = 0.5;
                    }
                }
            }
        }
    }
}
