//! Reader for the binary distribution of the 10-class 32×32 RGB benchmark.
//!
//! Each record is 1 label byte followed by 3072 channel-major pixel bytes
//! (1024 red, 1024 green, 1024 blue, each row-major). The train split is the
//! concatenation of `data_batch_1..5.bin`; test is `test_batch.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::{LabelledDataset, Split};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn load_cifar10(root: &Path, split: Split) -> Result<LabelledDataset> {
    let dir = batches_dir(root);
    let files: Vec<PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        _ => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
    };

    let mut records: Vec<Vec<u8>> = Vec::new();
    for f in &files {
        let bytes = fs::read(f)
            .map_err(|e| Error::load(format!("cannot read {}: {e}", f.display())))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::load(format!(
                "{}: {} bytes is not a whole number of {RECORD}-byte records",
                f.display(),
                bytes.len()
            )));
        }
        for chunk in bytes.chunks(RECORD) {
            records.push(chunk.to_vec());
        }
    }

    let n = records.len();
    let mut images = Array4::<f64>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    {
        let flat = images.as_slice_mut().expect("freshly allocated");
        for (i, rec) in records.iter().enumerate() {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::load(format!("record {i}: label byte {label} >= {CLASSES}")));
            }
            labels.push(label);
            let dst = &mut flat[i * 3072..(i + 1) * 3072];
            for (d, &b) in dst.iter_mut().zip(&rec[1..]) {
                *d = f64::from(b) / 255.0;
            }
        }
    }
    LabelledDataset::new(images, labels, split, CLASSES)
}

/// Accept either the archive directory itself or its parent.
fn batches_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}
