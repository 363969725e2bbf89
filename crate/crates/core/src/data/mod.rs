//! Dataset loading, class partitioning and batch sampling.
//!
//! A [`LabelledDataset`] is an immutable image tensor plus labels. For each
//! class k it can be partitioned into the in-distribution part (class k) and
//! the out-distribution mixture (every other class). Batch sampling draws the
//! out-distribution side class-uniformly so each of the K−1 classes carries
//! weight 1/(K−1), independent of per-class counts.

mod augment;
mod cifar;
mod synth;


pub use augment::{augment, AugmentPolicy};

use std::fmt;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedState;
use crate::ImageBatch;

/// Which split a dataset was loaded as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// Known dataset identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    /// The standard 10-class 32×32 RGB benchmark, read from its binary
    /// distribution files.
    Cifar10,
    /// Two well-separated Gaussian blobs in 2-D, stored as 1×1×2 images.
    ToyGaussians2d,
    /// Synthetic 28×28 grayscale shapes (disk / square / cross), three
    /// classes, generated deterministically from a seed.
    SynthShapes,
}

impl DatasetId {
    pub fn parse(s: &str) -> Result<DatasetId> {
        match s {
            "cifar10" => Ok(DatasetId::Cifar10),
            "toy-gaussians-2d" => Ok(DatasetId::ToyGaussians2d),
            "synth-shapes" => Ok(DatasetId::SynthShapes),
            other => Err(Error::config(format!("unknown dataset id `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::ToyGaussians2d => "toy-gaussians-2d",
            DatasetId::SynthShapes => "synth-shapes",
        }
    }
}

/// Parameters for the synthetic datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Training samples generated per class (the test split uses half).
    pub per_class: usize,
    /// Square image side for synth-shapes.
    pub image_size: usize,
    /// Generator seed; distinct splits fork distinct streams from it.
    pub seed: u64,
    /// Additive background noise amplitude.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            per_class: 300,
            image_size: 28,
            seed: 7,
            noise: 0.05,
        }
    }
}

/// How to realize the train/val/test protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Fraction of the train split carved off as validation data.
    pub val_fraction: f64,
    /// Seed for the validation carve permutation. Recorded in the run
    /// manifest so the carve is reproducible.
    pub val_seed: u64,
    /// Use the test split as validation data instead of carving from train.
    /// This reproduces the protocol of early-stopping and calibrating on the
    /// evaluation set; the default carve avoids that leakage.
    pub val_from_test: bool,
    pub synth: SynthParams,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            val_fraction: 0.1,
            val_seed: 9,
            val_from_test: false,
            synth: SynthParams::default(),
        }
    }
}

/// An immutable split of labelled images, pixels in [0,1].
#[derive(Debug, Clone)]
pub struct LabelledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl LabelledDataset {
    pub fn new(
        images: ImageBatch,
        labels: Vec<usize>,
        split: Split,
        num_classes: usize,
    ) -> Result<LabelledDataset> {
        let ds = LabelledDataset {
            images,
            labels,
            split,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.images.shape()[0];
        if n == 0 {
            return Err(Error::load("dataset is empty"));
        }
        if self.labels.len() != n {
            return Err(Error::load(format!(
                "{} images but {} labels",
                n,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::load(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if let Some((i, _)) = self
            .images
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v) || v.is_nan())
        {
            return Err(Error::numeric("pixel outside [0,1]", Some(i)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W) of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Row indices carrying label `k`, in source order.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| i)
            .collect()
    }

    /// New dataset holding the given rows, order preserved.
    pub fn select(&self, rows: &[usize], split: Split) -> LabelledDataset {
        LabelledDataset {
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            split,
            num_classes: self.num_classes,
        }
    }

    /// Content hash over shape, labels and pixel bytes. Two datasets with the
    /// same fingerprint hold bit-identical tensors.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        // The tensor is freshly allocated and therefore standard-layout, but
        // fall back to an iteration that does not depend on memory layout.
        match self.images.as_slice() {
            Some(s) => {
                for v in s {
                    h.update(v.to_le_bytes());
                }
            }
            None => {
                for v in self.images.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// In-distribution (class k) versus the mixture of every other class.
#[derive(Debug, Clone)]
pub struct ClassPartition {
    pub class: usize,
    pub in_dist: LabelledDataset,
    pub out_dist: LabelledDataset,
    /// Row indices of `out_dist` grouped per source class, used to give each
    /// of the K−1 classes equal sampling weight.
    out_by_class: Vec<(usize, Vec<usize>)>,
}

impl ClassPartition {
    /// Per-class row groups of the out-distribution side.
    pub fn out_groups(&self) -> &[(usize, Vec<usize>)] {
        &self.out_by_class
    }
}

/// Split `ds` into class k and the complement mixture.
pub fn class_partition(ds: &LabelledDataset, k: usize) -> Result<ClassPartition> {
    if k >= ds.num_classes {
        return Err(Error::argument(format!(
            "class {k} out of range for {} classes",
            ds.num_classes
        )));
    }
    let in_rows = ds.class_indices(k);
    let out_rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != k).collect();
    if in_rows.is_empty() || out_rows.is_empty() {
        return Err(Error::load(format!(
            "class {k} partition is degenerate: {} in, {} out",
            in_rows.len(),
            out_rows.len()
        )));
    }
    let in_dist = ds.select(&in_rows, ds.split);
    let out_dist = ds.select(&out_rows, ds.split);
    let out_by_class = (0..ds.num_classes)
        .filter(|&c| c != k)
        .map(|c| (c, out_dist.class_indices(c)))
        .collect();
    Ok(ClassPartition {
        class: k,
        in_dist,
        out_dist,
        out_by_class,
    })
}

/// Row indices for one paired batch: in-distribution rows uniformly with
/// replacement, out-distribution rows by first picking one of the K−1 classes
/// uniformly and then a member uniformly, realizing the 1/(K−1) mixture
/// weights exactly.
pub fn sample_pair_rows(
    part: &ClassPartition,
    batch: usize,
    rng: &mut SeedState,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let limit = part.in_dist.len().min(part.out_dist.len());
    if batch == 0 || batch > limit {
        return Err(Error::argument(format!(
            "batch size {batch} outside 1..={limit}"
        )));
    }
    let in_rows = (0..batch).map(|_| rng.index(part.in_dist.len())).collect();
    let out_rows = (0..batch)
        .map(|_| {
            let (_, rows) = &part.out_by_class[rng.index(part.out_by_class.len())];
            rows[rng.index(rows.len())]
        })
        .collect();
    Ok((in_rows, out_rows))
}

/// Draw one paired batch of images, `batch` per side.
pub fn sample_training_pair(
    part: &ClassPartition,
    batch: usize,
    rng: &mut SeedState,
) -> Result<(ImageBatch, ImageBatch)> {
    let (in_rows, out_rows) = sample_pair_rows(part, batch, rng)?;
    Ok((
        part.in_dist.images.select(Axis(0), &in_rows),
        part.out_dist.images.select(Axis(0), &out_rows),
    ))
}

/// Load a dataset split with default protocol options.
pub fn load_dataset(id: DatasetId, root: &Path, split: Split) -> Result<LabelledDataset> {
    load_dataset_with(id, root, split, &LoadOptions::default())
}

/// Load a dataset split.
///
/// The validation split is carved from train by a seeded permutation (or
/// aliased to test when `val_from_test` is set); train rows stay in source
/// order with the carved rows removed.
pub fn load_dataset_with(
    id: DatasetId,
    root: &Path,
    split: Split,
    opts: &LoadOptions,
) -> Result<LabelledDataset> {
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::config(format!(
            "val_fraction {} outside [0,1)",
            opts.val_fraction
        )));
    }
    let source = match (split, opts.val_from_test) {
        (Split::Test, _) | (Split::Val, true) => Split::Test,
        _ => Split::Train,
    };
    let full = match id {
        DatasetId::Cifar10 => cifar::load_cifar10(root, source)?,
        DatasetId::ToyGaussians2d => synth::toy_gaussians_2d(&opts.synth, source),
        DatasetId::SynthShapes => synth::synth_shapes(&opts.synth, source)?,
    };
    match (split, opts.val_from_test) {
        (Split::Test, _) => Ok(full),
        (Split::Val, true) => Ok(LabelledDataset {
            split: Split::Val,
            ..full
        }),
        (Split::Train, true) => Ok(full),
        (Split::Train, false) | (Split::Val, false) => {
            let (train_rows, val_rows) = carve_val(full.len(), opts);
            match split {
                Split::Train => Ok(full.select(&train_rows, Split::Train)),
                Split::Val => {
                    if val_rows.is_empty() {
                        return Err(Error::config(
                            "val split requested but val_fraction is 0",
                        ));
                    }
                    Ok(full.select(&val_rows, Split::Val))
                }
                Split::Test => unreachable!(),
            }
        }
    }
}

/// Deterministic carve of `n` train rows into (train, val) index sets, both
/// in ascending source order.
fn carve_val(n: usize, opts: &LoadOptions) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * opts.val_fraction).floor() as usize;
    let mut rng = SeedState::new(opts.val_seed).fork("val-carve");
    let perm = rng.permutation(n);
    let mut val: Vec<usize> = perm[..n_val].to_vec();
    val.sort_unstable();
    let mut in_val = vec![false; n];
    for &i in &val {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !in_val[i]).collect();
    (train, val)
}
