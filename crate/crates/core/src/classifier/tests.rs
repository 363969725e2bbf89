use std::path::Path;

use ndarray::Array2;

use super::*;
use crate::attack::{ClassLogit, ScalarObjective};
use crate::data::{load_dataset_with, DatasetId, LoadOptions, Split, SynthParams};
use crate::nn::arch::{build_network, ArchId};
use crate::testkit::rand_images;

/// A head computing w·x + b over two pixels.
fn linear_head(class: usize, w: [f64; 2], b: f64) -> BinaryHead {
    let mut rng = SeedState::new(1);
    let mut net = build_network(ArchId::LinearToy, (1, 1, 2), 1, &mut rng);
    net.visit_tensors_mut(&mut |_, mut view| {
        if view.ndim() == 2 {
            for (dst, &src) in view.iter_mut().zip(&w) {
                *dst = src;
            }
        } else {
            view.fill(b);
        }
    });
    BinaryHead { net, class }
}

fn constant_heads(values: &[f64]) -> GenerativeClassifier {
    let heads = values
        .iter()
        .enumerate()
        .map(|(k, &v)| linear_head(k, [0.0, 0.0], v))
        .collect();
    GenerativeClassifier::new(heads).unwrap()
}

fn one_image() -> ImageBatch {
    ImageBatch::from_elem((1, 1, 1, 2), 0.5)
}

#[test]
fn constructor_enforces_order_and_arity() {
    assert!(GenerativeClassifier::new(vec![linear_head(0, [0.0; 2], 0.0)]).is_err());
    let out_of_order = vec![linear_head(1, [0.0; 2], 0.0), linear_head(0, [0.0; 2], 0.0)];
    assert!(GenerativeClassifier::new(out_of_order).is_err());
}

#[test]
fn logits_add_calibration_and_priors() {
    let mut gc = constant_heads(&[2.0, 1.0]);
    let x = one_image();
    // Zero calibration, uniform priors: raw scores plus the shared ln ½.
    let z = gc.logits(&x).unwrap();
    assert!((z[[0, 0]] - (2.0 - 2.0f64.ln())).abs() < 1e-12);
    assert!((z[[0, 1]] - (1.0 - 2.0f64.ln())).abs() < 1e-12);

    gc.calib = vec![0.0, 0.5];
    let z = gc.logits(&x).unwrap();
    assert!((z[[0, 0]] - z[[0, 1]] - 0.5).abs() < 1e-12); // 2.0 vs 1.5
}

#[test]
fn predict_follows_calibrated_argmax() {
    let mut gc = constant_heads(&[1.0, 1.2]);
    let x = one_image();
    assert_eq!(gc.predict(&x).unwrap(), vec![1]);
    // calib (0.3, 0) flips it: 1.3 > 1.2.
    gc.calib = vec![0.3, 0.0];
    assert_eq!(gc.predict(&x).unwrap(), vec![0]);

    // Shared shifts never change predictions.
    let before = gc.predict(&x).unwrap();
    for v in &mut gc.calib {
        *v += 5.0;
    }
    assert_eq!(gc.predict(&x).unwrap(), before);
}

#[test]
fn equal_scores_break_ties_to_lowest_class() {
    let gc = constant_heads(&[0.7, 0.7, 0.7]);
    assert_eq!(gc.predict(&one_image()).unwrap(), vec![0]);
}

#[test]
fn posterior_is_normalized_and_agrees_with_predict() {
    let gc = constant_heads(&[0.1, 0.9, 0.4, 0.4]);
    let mut rng = SeedState::new(2);
    let x = rand_images(5, (1, 1, 2), &mut rng);
    let p = gc.posterior(&x).unwrap();
    for row in p.rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
    }
    assert_eq!(crate::nn::argmax_rows(&p), gc.predict(&x).unwrap());

    // Four equal heads → uniform posterior.
    let equal = constant_heads(&[0.3, 0.3, 0.3, 0.3]);
    let p = equal.posterior(&one_image()).unwrap();
    for v in p.iter() {
        assert!((v - 0.25).abs() < 1e-12);
    }

    // K = 2 with score gap ln 2 → (2/3, 1/3).
    let two = constant_heads(&[std::f64::consts::LN_2, 0.0]);
    let p = two.posterior(&one_image()).unwrap();
    assert!((p[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
    assert!((p[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn non_finite_head_scores_surface_as_errors() {
    let gc = constant_heads(&[0.0, f64::NAN]);
    let err = gc.logits(&one_image()).unwrap_err();
    assert!(err.to_string().contains("head 1"), "{err}");
}

#[test]
fn priors_from_counts_shift_decisions() {
    let mut gc = constant_heads(&[0.0, 0.0]);
    assert!(gc.set_priors_from_counts(&[30, 10]).is_ok());
    assert!((gc.log_priors[0] - 0.75f64.ln()).abs() < 1e-12);
    assert!((gc.log_priors[1] - 0.25f64.ln()).abs() < 1e-12);
    // Equal scores now resolve toward the majority class.
    assert_eq!(gc.predict(&one_image()).unwrap(), vec![0]);
    assert!(gc.set_priors_from_counts(&[5, 0]).is_err());
    assert!(gc.set_priors_from_counts(&[1, 2, 3]).is_err());
}

#[test]
fn class_logit_gradients_are_the_head_weights() {
    let gc = GenerativeClassifier::new(vec![
        linear_head(0, [0.3, -0.1], 0.2),
        linear_head(1, [-0.5, 0.7], 0.0),
    ])
    .unwrap();
    let mut rng = SeedState::new(3);
    let x = rand_images(3, (1, 1, 2), &mut rng);
    let obj = ClassLogit { model: &gc, class: 1 };
    let (vals, grad) = obj.eval_grad(&x);
    for i in 0..3 {
        let expect = -0.5 * x[[i, 0, 0, 0]] + 0.7 * x[[i, 0, 0, 1]] - 2.0f64.ln();
        assert!((vals[i] - expect).abs() < 1e-12);
        assert!((grad[[i, 0, 0, 0]] - -0.5).abs() < 1e-12);
        assert!((grad[[i, 0, 0, 1]] - 0.7).abs() < 1e-12);
    }
}

/// Two-class 1-D gaussian scores with a planted offset on head 0; the
/// grid-search oracle and the gradient fit must both recover it.
#[test]
fn calibration_recovers_a_planted_offset() {
    let n = 4000;
    let offset = 3.0;
    let mut rng = SeedState::new(4);
    let mut base = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = usize::from(rng.coin(0.5));
        let mu = if y == 0 { -1.0 } else { 1.0 };
        let x = mu + rng.normal();
        // True log-densities up to a shared constant, head 0 inflated.
        base[[i, 0]] = -(x + 1.0) * (x + 1.0) / 2.0 + offset;
        base[[i, 1]] = -(x - 1.0) * (x - 1.0) / 2.0;
        labels.push(y);
    }

    // Oracle: exhaustive search over the only identifiable quantity.
    let rows: Vec<usize> = (0..n).collect();
    let mut grid_best = (f64::INFINITY, 0.0);
    let mut t = -5.0;
    while t <= 5.0 {
        let ce = mean_ce(&base, &[t, 0.0], &rows, &labels);
        if ce < grid_best.0 {
            grid_best = (ce, t);
        }
        t += 0.01;
    }
    assert!(
        (grid_best.1 + offset).abs() <= 0.05,
        "grid optimum {} vs planted {}",
        grid_best.1,
        -offset
    );

    let cfg = CalibrationConfig {
        holdout_fraction: 0.0, // match the oracle's objective exactly
        ..CalibrationConfig::default()
    };
    let outcome = calibrate_scores(&base, &labels, &cfg).unwrap();
    let diff = outcome.calib[0] - outcome.calib[1];
    assert!((diff - grid_best.1).abs() <= 0.03, "gd {diff} vs grid {}", grid_best.1);
    assert!((diff + offset).abs() <= 0.05, "gd {diff} vs planted {}", -offset);
    assert!(outcome.missing_classes.is_empty());
    assert!(outcome.calib.iter().sum::<f64>().abs() < 1e-9);
}

#[test]
fn calibration_never_hurts_the_objective() {
    let mut rng = SeedState::new(5);
    for trial in 0..5 {
        let n = 40 + trial * 17;
        let k = 2 + trial % 3;
        let mut base = Array2::zeros((n, k));
        base.mapv_inplace(|_| rng.normal());
        let labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let zeros = vec![0.0; k];
        let before = mean_ce(&base, &zeros, &rows, &labels);
        let outcome = calibrate_scores(&base, &labels, &CalibrationConfig::default()).unwrap();
        let after = mean_ce(&base, &outcome.calib, &rows, &labels);
        assert!(
            after <= before + 1e-12,
            "trial {trial}: CE rose from {before} to {after}"
        );
    }
}

#[test]
fn absent_classes_are_reported() {
    let mut rng = SeedState::new(6);
    let mut base = Array2::zeros((20, 4));
    base.mapv_inplace(|_| rng.normal());
    let labels: Vec<usize> = (0..20).map(|i| [0usize, 1, 3][i % 3]).collect();
    let outcome = calibrate_scores(&base, &labels, &CalibrationConfig::default()).unwrap();
    assert_eq!(outcome.missing_classes, vec![2]);
}

#[test]
fn calibrate_scores_rejects_bad_input() {
    let base = Array2::zeros((3, 2));
    assert!(calibrate_scores(&base, &[0, 1], &CalibrationConfig::default()).is_err());
    assert!(calibrate_scores(&base, &[0, 1, 5], &CalibrationConfig::default()).is_err());
    let empty = Array2::zeros((0, 2));
    assert!(calibrate_scores(&empty, &[], &CalibrationConfig::default()).is_err());
    let mut nan = Array2::zeros((2, 2));
    nan[[1, 0]] = f64::NAN;
    assert!(calibrate_scores(&nan, &[0, 1], &CalibrationConfig::default()).is_err());
    let bad_cfg = CalibrationConfig {
        holdout_fraction: 1.0,
        ..CalibrationConfig::default()
    };
    assert!(calibrate_scores(&Array2::zeros((2, 2)), &[0, 1], &bad_cfg).is_err());
}

#[test]
fn calibrate_fits_constants_on_a_dataset() {
    let opts = LoadOptions {
        synth: SynthParams {
            per_class: 300,
            ..SynthParams::default()
        },
        ..LoadOptions::default()
    };
    let val = load_dataset_with(DatasetId::ToyGaussians2d, Path::new(""), Split::Val, &opts).unwrap();

    // Head 1 planted 3 too low; calibration has to push it back up.
    let mut gc = GenerativeClassifier::new(vec![
        linear_head(0, [-4.0, -4.0], 2.8),
        linear_head(1, [4.0, 4.0], -2.8 - 3.0),
    ])
    .unwrap();

    let val_ce = |gc: &GenerativeClassifier| {
        let z = gc.logits(&val.images).unwrap();
        crate::attack::ce_values(&z, &val.labels).iter().sum::<f64>() / val.len() as f64
    };
    let before = val_ce(&gc);
    let outcome = gc.calibrate(&val, &CalibrationConfig::default()).unwrap();
    assert_eq!(gc.calib, outcome.calib);
    assert!(outcome.calib.iter().sum::<f64>().abs() < 1e-9);
    assert!(outcome.calib[1] > outcome.calib[0], "correction direction: {:?}", outcome.calib);
    assert!(val_ce(&gc) <= before + 1e-12);
    assert!(outcome.iterations > 0);
}

#[test]
fn bundle_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut gc = GenerativeClassifier::new(vec![
        linear_head(0, [0.4, -0.2], 0.1),
        linear_head(1, [-0.3, 0.6], -0.2),
    ])
    .unwrap();
    gc.calib = vec![0.25, -0.25];
    gc.log_priors = vec![0.6f64.ln(), 0.4f64.ln()];

    let meta: Vec<CheckpointMeta> = (0..2)
        .map(|k| CheckpointMeta {
            arch: ArchId::LinearToy,
            class_index: Some(k),
            in_shape: (1, 1, 2),
            out_dim: 1,
            epoch: 7,
            config_hash: "roundtrip".into(),
            train_loss: 0.05,
            clean_metric: 0.99,
            adv_metric: 0.97,
        })
        .collect();
    let record = CalibrationRecord {
        calib: gc.calib.clone(),
        log_priors: gc.log_priors.clone(),
        config_hash: "roundtrip".into(),
        val_fingerprint: "abc123".into(),
        outcome: None,
    };
    save_bundle(dir.path(), &gc, &meta, &record).unwrap();

    let (loaded, rec) = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded.calib, gc.calib);
    assert_eq!(loaded.log_priors, gc.log_priors);
    assert_eq!(rec.val_fingerprint, "abc123");

    let mut rng = SeedState::new(7);
    let x = rand_images(4, (1, 1, 2), &mut rng);
    assert_eq!(loaded.logits(&x).unwrap(), gc.logits(&x).unwrap());
    assert_eq!(loaded.predict(&x).unwrap(), gc.predict(&x).unwrap());
}
