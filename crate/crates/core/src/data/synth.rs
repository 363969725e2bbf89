//! Synthetic datasets, generated deterministically from a seed.
//!
//! Every image gets its own forked generator stream keyed by split, class and
//! index, so the content of sample i never depends on how many samples were
//! generated before it.

use ndarray::Array4;

use super::{LabelledDataset, Split, SynthParams};
use crate::error::{Error, Result};
use crate::rng::SeedState;

/// Two Gaussian blobs at (0.3, 0.3) and (0.7, 0.7), stored as 1×1×2 images.
pub fn toy_gaussians_2d(params: &SynthParams, split: Split) -> LabelledDataset {
    let per_class = split_count(params.per_class, split);
    let n = 2 * per_class;
    let mut images = Array4::<f64>::zeros((n, 1, 1, 2));
    let mut labels = Vec::with_capacity(n);
    let sigma = 0.08;
    for class in 0..2usize {
        let mean = if class == 0 { 0.3 } else { 0.7 };
        for i in 0..per_class {
            let mut rng = stream(params.seed, split, class, i);
            let row = class * per_class + i;
            for d in 0..2 {
                images[[row, 0, 0, d]] = (mean + sigma * rng.normal()).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    LabelledDataset {
        images,
        labels,
        split,
        num_classes: 2,
    }
}

/// Grayscale shapes on a noisy background: class 0 a filled disk, class 1 a
/// hollow square, class 2 a cross. Center, size and intensity are jittered
/// per image.
pub fn synth_shapes(params: &SynthParams, split: Split) -> Result<LabelledDataset> {
    let side = params.image_size;
    if side < 12 {
        return Err(Error::config(format!(
            "synth-shapes needs image_size >= 12, got {side}"
        )));
    }
    if !(0.0..=0.3).contains(&params.noise) {
        return Err(Error::config(format!(
            "synth-shapes noise {} outside [0, 0.3]",
            params.noise
        )));
    }
    let per_class = split_count(params.per_class, split);
    let n = 3 * per_class;
    let mut images = Array4::<f64>::zeros((n, 1, side, side));
    let mut labels = Vec::with_capacity(n);
    for class in 0..3usize {
        for i in 0..per_class {
            let mut rng = stream(params.seed, split, class, i);
            let row = class * per_class + i;
            let mid = side as f64 / 2.0;
            let jitter = side as f64 / 7.0;
            let cx = mid + rng.uniform_in(-jitter, jitter);
            let cy = mid + rng.uniform_in(-jitter, jitter);
            let r = rng.uniform_in(side as f64 / 5.0, side as f64 / 3.2);
            let intensity = rng.uniform_in(0.6, 0.95);
            for y in 0..side {
                for x in 0..side {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let inside = match class {
                        0 => dx * dx + dy * dy <= r * r,
                        1 => {
                            let m = dx.abs().max(dy.abs());
                            m <= r && m >= r - 2.0
                        }
                        _ => {
                            let t = (r / 3.0).max(1.5);
                            (dx.abs() <= t && dy.abs() <= r)
                                || (dy.abs() <= t && dx.abs() <= r)
                        }
                    };
                    let bg = rng.uniform() * params.noise;
                    let v = if inside { bg + intensity } else { bg };
                    images[[row, 0, y, x]] = v.clamp(0.0, 1.0);
                }
            }
            labels.push(class);
        }
    }
    LabelledDataset::new(images, labels, split, 3)
}

fn split_count(per_class: usize, split: Split) -> usize {
    match split {
        Split::Test => (per_class / 2).max(2),
        _ => per_class.max(2),
    }
}

fn stream(seed: u64, split: Split, class: usize, index: usize) -> SeedState {
    SeedState::new(seed)
        .fork(&format!("synth-{split}-{class}"))
        .fork_indexed("sample", index as u64)
}
