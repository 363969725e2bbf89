//! Composition of per-class binary heads into a calibrated generative
//! classifier.
//!
//! Each head's output d_k(x) is an unnormalized class-conditional
//! log-density; the classifier scores class k as d_k(x) + c_k + log p(k) and
//! predicts the argmax. The constants c_k absorb the intractable log
//! partition functions (up to a shared shift that cancels in the argmax) and
//! are learned on validation data with the heads frozen; the partition
//! functions themselves are never computed.

#[cfg(test)]
mod tests;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attack::{ce_values, softmax_rows, LogitModel};
use crate::data::LabelledDataset;
use crate::error::{Error, Result};
use crate::nn::io::{load_network, save_checkpoint, CheckpointMeta};
use crate::nn::{argmax_rows, Mode};
use crate::rng::SeedState;
use crate::train::BinaryHead;
use crate::ImageBatch;

/// K binary heads plus calibration constants and log class priors.
#[derive(Debug, Clone)]
pub struct GenerativeClassifier {
    heads: Vec<BinaryHead>,
    pub calib: Vec<f64>,
    pub log_priors: Vec<f64>,
}

impl GenerativeClassifier {
    /// Heads must be supplied in class order (head k scores class k), with
    /// calibration zeroed and priors uniform.
    pub fn new(heads: Vec<BinaryHead>) -> Result<GenerativeClassifier> {
        let k = heads.len();
        if k < 2 {
            return Err(Error::argument(format!("need at least 2 heads, got {k}")));
        }
        for (i, head) in heads.iter().enumerate() {
            if head.class != i {
                return Err(Error::argument(format!(
                    "head at position {i} scores class {}; heads must be in class order",
                    head.class
                )));
            }
            if head.net.out_dim != 1 {
                return Err(Error::argument(format!(
                    "head {i} has {} outputs, expected a scalar score",
                    head.net.out_dim
                )));
            }
        }
        Ok(GenerativeClassifier {
            heads,
            calib: vec![0.0; k],
            log_priors: vec![-(k as f64).ln(); k],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[BinaryHead] {
        &self.heads
    }

    /// Replace the uniform prior with log(count/total).
    pub fn set_priors_from_counts(&mut self, counts: &[usize]) -> Result<()> {
        if counts.len() != self.num_classes() {
            return Err(Error::argument(format!(
                "{} class counts for {} heads",
                counts.len(),
                self.num_classes()
            )));
        }
        let total: usize = counts.iter().sum();
        if counts.contains(&0) {
            return Err(Error::argument("every class needs a non-zero count"));
        }
        self.log_priors = counts
            .iter()
            .map(|&c| (c as f64 / total as f64).ln())
            .collect();
        Ok(())
    }

    /// Raw head scores, one column per class. No finiteness check.
    fn raw_scores(&self, x: &ImageBatch) -> Array2<f64> {
        let n = x.shape()[0];
        let k = self.num_classes();
        let mut scores = Array2::zeros((n, k));
        for (ki, head) in self.heads.iter().enumerate() {
            let out = head.net.infer(x);
            scores
                .index_axis_mut(Axis(1), ki)
                .assign(&out.index_axis(Axis(1), 0));
        }
        scores
    }

    /// Decision scores d_k(x) + c_k + log p(k).
    pub fn logits(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        let mut scores = self.raw_scores(x);
        for (ki, mut col) in scores.axis_iter_mut(Axis(1)).enumerate() {
            if let Some(bad) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    format!("head {ki} produced a non-finite score"),
                    Some(bad),
                ));
            }
            let shift = self.calib[ki] + self.log_priors[ki];
            col.mapv_inplace(|v| v + shift);
        }
        Ok(scores)
    }

    /// Per-sample argmax of the decision scores; ties break to the lowest
    /// class index.
    pub fn predict(&self, x: &ImageBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Row-wise softmax of the decision scores.
    pub fn posterior(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Learn the calibration constants on a validation set with the heads
    /// frozen, store them, and report how the fit went.
    pub fn calibrate(
        &mut self,
        val: &LabelledDataset,
        cfg: &CalibrationConfig,
    ) -> Result<CalibrationOutcome> {
        if val.num_classes != self.num_classes() {
            return Err(Error::argument(format!(
                "validation set has {} classes, classifier has {}",
                val.num_classes,
                self.num_classes()
            )));
        }
        let mut base = self.raw_scores(&val.images);
        for (ki, mut col) in base.axis_iter_mut(Axis(1)).enumerate() {
            let lp = self.log_priors[ki];
            col.mapv_inplace(|v| v + lp);
        }
        let outcome = calibrate_scores(&base, &val.labels, cfg)?;
        self.calib = outcome.calib.clone();
        Ok(outcome)
    }
}

/// The per-class attack surface: the generative classifier is a logit model
/// whose k-th logit is head k's score plus its (constant) calibration terms.
impl LogitModel for GenerativeClassifier {
    fn num_classes(&self) -> usize {
        self.heads.len()
    }

    fn logits(&self, x: &ImageBatch) -> Array2<f64> {
        let mut scores = self.raw_scores(x);
        for (ki, mut col) in scores.axis_iter_mut(Axis(1)).enumerate() {
            let shift = self.calib[ki] + self.log_priors[ki];
            col.mapv_inplace(|v| v + shift);
        }
        scores
    }

    fn logits_grad(&self, x: &ImageBatch, gout: &Array2<f64>) -> ImageBatch {
        let mut gx = ImageBatch::zeros(x.raw_dim());
        for (ki, head) in self.heads.iter().enumerate() {
            let col = gout.index_axis(Axis(1), ki);
            // Heads with no outgoing gradient (common under per-class
            // objectives) don't need a backward pass.
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (_, tape) = head.net.forward(x, Mode::Eval);
            let head_gout = col.insert_axis(Axis(1)).to_owned();
            let (g, _) = head.net.backward(&tape, &head_gout, false);
            gx += &g;
        }
        gx
    }
}

/// Settings for the calibration fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop when one step improves the fit objective by less than this.
    pub tol: f64,
    /// Portion of the validation set held out for early stopping.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            lr: 0.01,
            max_iters: 10_000,
            tol: 1e-8,
            holdout_fraction: 0.25,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("calibration lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(format!(
                "holdout fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if self.tol < 0.0 || self.tol.is_nan() {
            return Err(Error::config("calibration tolerance must be ≥ 0"));
        }
        Ok(())
    }
}

/// Result of a calibration fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    /// Learned constants, centered to mean zero (the shared shift is
    /// unidentifiable).
    pub calib: Vec<f64>,
    /// Gradient steps taken before the improvement fell under tolerance.
    pub iterations: usize,
    /// Final mean cross-entropy on the fitting portion.
    pub fit_ce: f64,
    /// Mean cross-entropy of the selected constants on the held-out portion.
    pub holdout_ce: f64,
    /// Classes absent from the validation set; their constants are weakly
    /// determined and kept near the initialization.
    pub missing_classes: Vec<usize>,
}

fn mean_ce(base: &Array2<f64>, c: &[f64], rows: &[usize], labels: &[usize]) -> f64 {
    let shifted = shift_rows(base, c, rows);
    let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    ce_values(&shifted, &y).iter().sum::<f64>() / rows.len() as f64
}

fn shift_rows(base: &Array2<f64>, c: &[f64], rows: &[usize]) -> Array2<f64> {
    let k = base.ncols();
    let mut out = Array2::zeros((rows.len(), k));
    for (i, &r) in rows.iter().enumerate() {
        for ki in 0..k {
            out[[i, ki]] = base[[r, ki]] + c[ki];
        }
    }
    out
}

/// Fit the calibration vector to a frozen score matrix (one row per sample,
/// one column per class) by full-batch gradient descent on the mean
/// cross-entropy, with early stopping against a held-out portion. The scores
/// should already include the log priors.
pub fn calibrate_scores(
    base: &Array2<f64>,
    labels: &[usize],
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let n = base.nrows();
    let k = base.ncols();
    if n == 0 {
        return Err(Error::argument("calibration needs a non-empty validation set"));
    }
    if labels.len() != n {
        return Err(Error::argument(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::argument(format!("label {bad} out of range for {k} classes")));
    }
    if let Some(bad) = base.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite calibration score", Some(bad / k)));
    }

    let mut missing_classes: Vec<usize> = (0..k)
        .filter(|ki| !labels.contains(ki))
        .collect();
    missing_classes.sort_unstable();

    // Deterministic fit/holdout split.
    let mut rng = SeedState::new(cfg.seed).fork("calib-holdout");
    let perm = rng.permutation(n);
    let n_hold = ((n as f64) * cfg.holdout_fraction).floor() as usize;
    let (hold_rows, fit_rows) = if n_hold == 0 || n_hold == n {
        (Vec::new(), perm)
    } else {
        let (h, f) = perm.split_at(n_hold);
        (h.to_vec(), f.to_vec())
    };
    // With no usable holdout the fit portion doubles as the selector.
    let sel_rows: &[usize] = if hold_rows.is_empty() { &fit_rows } else { &hold_rows };

    let mut c = vec![0.0; k];
    let mut fit_ce = mean_ce(base, &c, &fit_rows, labels);
    let mut best_c = c.clone();
    let mut best_sel = mean_ce(base, &c, sel_rows, labels);
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        // ∂CE/∂c_k = mean over fit rows of (posterior_k − 1{y = k}).
        let probs = softmax_rows(&shift_rows(base, &c, &fit_rows));
        let mut grad = vec![0.0; k];
        for (i, &r) in fit_rows.iter().enumerate() {
            for ki in 0..k {
                grad[ki] += probs[[i, ki]];
            }
            grad[labels[r]] -= 1.0;
        }
        for (ck, gk) in c.iter_mut().zip(&grad) {
            *ck -= cfg.lr * gk / fit_rows.len() as f64;
        }
        iterations += 1;

        let new_fit = mean_ce(base, &c, &fit_rows, labels);
        let sel = mean_ce(base, &c, sel_rows, labels);
        if sel < best_sel {
            best_sel = sel;
            best_c = c.clone();
        }
        let improvement = fit_ce - new_fit;
        fit_ce = new_fit;
        if improvement < cfg.tol {
            break;
        }
    }

    let mean = best_c.iter().sum::<f64>() / k as f64;
    for v in &mut best_c {
        *v -= mean;
    }
    let fit_final = mean_ce(base, &best_c, &fit_rows, labels);
    let hold_final = mean_ce(base, &best_c, sel_rows, labels);
    Ok(CalibrationOutcome {
        calib: best_c,
        iterations,
        fit_ce: fit_final,
        holdout_ce: hold_final,
        missing_classes,
    })
}

/// Everything needed to reload a calibrated classifier next to its head
/// checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub calib: Vec<f64>,
    pub log_priors: Vec<f64>,
    pub config_hash: String,
    /// Fingerprint of the validation split the constants were fitted on.
    pub val_fingerprint: String,
    pub outcome: Option<CalibrationOutcome>,
}

fn bundle_head_stem(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("head_{k}"))
}

fn calibration_path(dir: &Path) -> PathBuf {
    dir.join("calibration.json")
}

/// Write a classifier bundle: one checkpoint per head plus the calibration
/// record.
pub fn save_bundle(
    dir: &Path,
    gc: &GenerativeClassifier,
    head_meta: &[CheckpointMeta],
    record: &CalibrationRecord,
) -> Result<()> {
    if head_meta.len() != gc.num_classes() {
        return Err(Error::argument(format!(
            "{} head metadata entries for {} heads",
            head_meta.len(),
            gc.num_classes()
        )));
    }
    std::fs::create_dir_all(dir)?;
    for (k, head) in gc.heads.iter().enumerate() {
        save_checkpoint(&bundle_head_stem(dir, k), &head.net.snapshot(), &head_meta[k])?;
    }
    let f = File::create(calibration_path(dir))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, record)
        .map_err(|e| Error::config(format!("serializing calibration record: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Load a classifier bundle written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<(GenerativeClassifier, CalibrationRecord)> {
    let f = File::open(calibration_path(dir))
        .map_err(|e| Error::load(format!("calibration record in {}: {e}", dir.display())))?;
    let record: CalibrationRecord = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::load(format!("parsing calibration record: {e}")))?;
    let k = record.calib.len();
    if record.log_priors.len() != k {
        return Err(Error::load(format!(
            "calibration record has {} priors for {k} constants",
            record.log_priors.len()
        )));
    }
    let mut heads = Vec::with_capacity(k);
    for ki in 0..k {
        let (net, meta) = load_network(&bundle_head_stem(dir, ki))?;
        let class = meta.class_index.ok_or_else(|| {
            Error::load(format!("head {ki} checkpoint is missing its class index"))
        })?;
        heads.push(BinaryHead { net, class });
    }
    let mut gc = GenerativeClassifier::new(heads)?;
    gc.calib = record.calib.clone();
    gc.log_priors = record.log_priors.clone();
    Ok((gc, record))
}
