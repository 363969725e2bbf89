use std::path::Path;

use super::*;
use crate::attack::NormKind;
use crate::data::{load_dataset_with, DatasetId, LoadOptions, Split, SynthParams};
use crate::nn::arch::{build_network, ArchId};
use crate::testkit::rand_images;
use crate::train::BinaryHead;
use crate::ImageBatch;

fn pair(pos: &[f64], neg: &[f64]) -> ScorePair {
    ScorePair::new(pos.to_vec(), neg.to_vec()).unwrap()
}

/// O(P·Q) definition: fraction of (pos, neg) pairs with pos > neg, ties
/// counting one half.
fn pairwise_auroc(scores: &ScorePair) -> f64 {
    let mut wins = 0.0;
    for &p in &scores.pos {
        for &n in &scores.neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (scores.pos.len() * scores.neg.len()) as f64
}

#[test]
fn auroc_separated_and_mixed() {
    assert_eq!(auroc(&pair(&[0.9, 0.8], &[0.7, 0.1])), 1.0);
    assert_eq!(auroc(&pair(&[0.7, 0.1], &[0.9, 0.8])), 0.0);
    // Pairs: (0.9,0.6)=1 (0.9,0.2)=1 (0.4,0.6)=0 (0.4,0.2)=1 → 3/4.
    assert_eq!(auroc(&pair(&[0.9, 0.4], &[0.6, 0.2])), 0.75);
}

#[test]
fn auroc_identical_multisets_is_half() {
    let s = [0.3, 0.3, 1.2, -0.5];
    assert_eq!(auroc(&pair(&s, &s)), 0.5);
}

#[test]
fn auroc_ties_average() {
    // Pairs: (1,0.5)=1 (1,0)=1 (0.5,0.5)=½ (0.5,0)=1 → 3.5/4.
    assert_eq!(auroc(&pair(&[1.0, 0.5], &[0.5, 0.0])), 0.875);
}

#[test]
fn auroc_matches_pairwise_count() {
    let mut rng = SeedState::new(31);
    for trial in 0..20 {
        let p = 1 + rng.index(12);
        let q = 1 + rng.index(12);
        // Quantized scores force plenty of cross-side ties.
        let pos: Vec<f64> = (0..p).map(|_| (rng.index(7) as f64) / 3.0).collect();
        let neg: Vec<f64> = (0..q).map(|_| (rng.index(7) as f64) / 3.0).collect();
        let s = pair(&pos, &neg);
        let fast = auroc(&s);
        let slow = pairwise_auroc(&s);
        assert!(
            (fast - slow).abs() < 1e-12,
            "trial {trial}: rank {fast} vs pairwise {slow}"
        );
    }
}

#[test]
fn auroc_invariant_under_monotone_transforms() {
    let mut rng = SeedState::new(5);
    let pos: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
    let neg: Vec<f64> = (0..7).map(|_| rng.normal() - 0.4).collect();
    let base = auroc(&pair(&pos, &neg));
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|&s| 2.0 * s + 3.0).collect() };
    let expv = |v: &[f64]| -> Vec<f64> { v.iter().map(|&s| s.exp()).collect() };
    assert_eq!(auroc(&pair(&scale(&pos), &scale(&neg))), base);
    assert_eq!(auroc(&pair(&expv(&pos), &expv(&neg))), base);
}

#[test]
fn score_pair_rejects_bad_input() {
    assert!(ScorePair::new(vec![], vec![1.0]).is_err());
    assert!(ScorePair::new(vec![1.0], vec![]).is_err());
    assert!(ScorePair::new(vec![1.0, f64::NAN], vec![0.0]).is_err());
    assert!(ScorePair::new(vec![1.0], vec![f64::INFINITY]).is_err());
}

#[test]
fn head_rows_caps_and_preserves_order() {
    let mut rng = SeedState::new(3);
    let x = rand_images(5, (1, 2, 2), &mut rng);
    let capped = head_rows(&x, 3);
    assert_eq!(capped.shape(), &[3, 1, 2, 2]);
    assert_eq!(capped.index_axis(ndarray::Axis(0), 2), x.index_axis(ndarray::Axis(0), 2));
    let all = head_rows(&x, 99);
    assert_eq!(all, x);
}

fn toy_head(rng: &mut SeedState) -> Network {
    build_network(ArchId::LinearToy, (1, 2, 2), 1, rng)
}

fn toy_batches(rng: &mut SeedState) -> (ImageBatch, ImageBatch) {
    // Shift the two sides so the untrained head already ranks them apart a
    // little; the attack invariants below don't depend on how well.
    let mut in_x = rand_images(6, (1, 2, 2), rng);
    in_x.mapv_inplace(|v| 0.5 + 0.5 * v);
    let out_x = rand_images(6, (1, 2, 2), rng);
    (in_x, out_x)
}

#[test]
fn adversarial_auroc_at_zero_eps_equals_clean() {
    let mut rng = SeedState::new(11);
    let head = toy_head(&mut rng);
    let (in_x, out_x) = toy_batches(&mut rng);
    let clean = clean_auroc(&head, &in_x, &out_x).unwrap();
    let budget = AttackBudget::evaluation(NormKind::L2, 0.0);
    let mut arng = SeedState::new(99);
    let adv = adversarial_auroc_on(&head, &in_x, &out_x, &budget, &mut arng).unwrap();
    assert_eq!(adv, clean);
}

#[test]
fn attack_never_raises_auroc() {
    // Best-iterate attacks only lower in-scores and raise out-scores, so
    // every pairwise comparison moves against the head: the attacked AUROC
    // can't exceed the clean one.
    let mut rng = SeedState::new(12);
    let head = toy_head(&mut rng);
    let (in_x, out_x) = toy_batches(&mut rng);
    let clean = clean_auroc(&head, &in_x, &out_x).unwrap();
    for eps in [0.05, 0.3, 1.0] {
        let budget = AttackBudget::evaluation(NormKind::L2, eps);
        let mut arng = SeedState::new(42);
        let adv = adversarial_auroc_on(&head, &in_x, &out_x, &budget, &mut arng).unwrap();
        assert!(adv <= clean + 1e-12, "eps {eps}: adv {adv} > clean {clean}");
    }
}

#[test]
fn adversarial_auroc_deterministic() {
    let mut rng = SeedState::new(13);
    let head = toy_head(&mut rng);
    let (in_x, out_x) = toy_batches(&mut rng);
    let budget = AttackBudget::evaluation(NormKind::Linf, 0.1);
    let a = adversarial_auroc_on(&head, &in_x, &out_x, &budget, &mut SeedState::new(7)).unwrap();
    let b = adversarial_auroc_on(&head, &in_x, &out_x, &budget, &mut SeedState::new(7)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wide_margin_keeps_adversarial_auroc_at_one() {
    // Head score is x₀ + 0: in-scores sit at ≥ 0.8, out at ≤ 0.2. An L2
    // budget of 0.2 moves the score by at most ε·‖w‖ = 0.2, so the sides
    // can't cross no matter what the attack does.
    let mut rng = SeedState::new(2);
    let mut head = build_network(ArchId::LinearToy, (1, 1, 2), 1, &mut rng);
    head.visit_tensors_mut(&mut |_, mut view| {
        if view.ndim() == 2 {
            for (dst, src) in view.iter_mut().zip([1.0, 0.0]) {
                *dst = src;
            }
        } else {
            view.fill(0.0);
        }
    });
    let mut in_x = ImageBatch::from_elem((3, 1, 1, 2), 0.5);
    let mut out_x = in_x.clone();
    for (i, v) in [0.8, 0.85, 0.9].iter().enumerate() {
        in_x[[i, 0, 0, 0]] = *v;
        out_x[[i, 0, 0, 0]] = 1.0 - *v;
    }
    let budget = AttackBudget::evaluation(NormKind::L2, 0.2);
    let adv =
        adversarial_auroc_on(&head, &in_x, &out_x, &budget, &mut SeedState::new(3)).unwrap();
    assert_eq!(adv, 1.0);
}

// ---- classifier-level metrics ----

/// A head computing w·x + b over the two toy pixels.
fn eval_head(class: usize, w: [f64; 2], b: f64) -> BinaryHead {
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

/// Near-Bayes classifier for the two toy blobs: the heads score distance to
/// the x₀+x₁ = 1 boundary with opposite signs.
fn toy_classifier() -> GenerativeClassifier {
    GenerativeClassifier::new(vec![
        eval_head(0, [-1.0, -1.0], 1.0),
        eval_head(1, [1.0, 1.0], -1.0),
    ])
    .unwrap()
}

fn toy_set(per_class: usize) -> LabelledDataset {
    let opts = LoadOptions {
        synth: SynthParams {
            per_class,
            ..SynthParams::default()
        },
        ..LoadOptions::default()
    };
    load_dataset_with(DatasetId::ToyGaussians2d, Path::new(""), Split::Test, &opts).unwrap()
}

fn toy_softmax(rng: &mut SeedState) -> Network {
    build_network(ArchId::LinearToy, (1, 1, 2), 2, rng)
}

#[test]
fn standard_accuracy_exact_on_constructed_labels() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let ds = toy_set(20);
    let pred = model.predict(&ds.images).unwrap();

    let agree = LabelledDataset {
        images: ds.images.clone(),
        labels: pred.clone(),
        split: ds.split,
        num_classes: 2,
    };
    assert_eq!(standard_accuracy(model, &agree).unwrap(), 1.0);

    // Flip exactly half the labels: accuracy is exactly ½.
    let mut flipped = agree.clone();
    let half = flipped.labels.len() / 2;
    for y in flipped.labels.iter_mut().take(half) {
        *y = 1 - *y;
    }
    assert_eq!(standard_accuracy(model, &flipped).unwrap(), 0.5);
}

#[test]
fn per_class_accuracy_buckets_and_empty_classes() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    // Points far from the boundary so the predictions are unambiguous:
    // rows 0, 3 predict class 0; rows 1, 2 predict class 1.
    let mut images = ImageBatch::zeros((4, 1, 1, 2));
    for (i, v) in [0.1, 0.9, 0.8, 0.2].iter().enumerate() {
        images[[i, 0, 0, 0]] = *v;
        images[[i, 0, 0, 1]] = *v;
    }
    let ds = LabelledDataset {
        images,
        labels: vec![0, 1, 0, 0],
        split: Split::Test,
        num_classes: 3,
    };
    let per = per_class_accuracy(model, &ds).unwrap();
    assert_eq!(per, vec![Some(2.0 / 3.0), Some(1.0), None]);
}

#[test]
fn zero_epsilon_robust_accuracy_equals_standard() {
    let gc = toy_classifier();
    let ds = toy_set(15);
    let budget = AttackBudget::evaluation(NormKind::L2, 0.0);
    let mut rng = SeedState::new(4);

    let generative = ClassifierModel::Generative(&gc);
    let standard = standard_accuracy(generative, &ds).unwrap();
    for attack in [AttackId::UntargetedCe, AttackId::Adaptive] {
        let robust = robust_accuracy(generative, &ds, attack, &budget, &mut rng).unwrap();
        assert_eq!(robust, standard, "{attack:?}");
    }

    let mut nrng = SeedState::new(6);
    let net = toy_softmax(&mut nrng);
    let softmax = ClassifierModel::Softmax(&net);
    let standard = standard_accuracy(softmax, &ds).unwrap();
    let robust =
        robust_accuracy(softmax, &ds, AttackId::UntargetedCe, &budget, &mut rng).unwrap();
    assert_eq!(robust, standard);
}

#[test]
fn adaptive_attack_requires_per_head_access() {
    let mut rng = SeedState::new(8);
    let net = toy_softmax(&mut rng);
    let ds = toy_set(4);
    let budget = AttackBudget::evaluation(NormKind::L2, 0.1);
    let err = robust_accuracy(
        ClassifierModel::Softmax(&net),
        &ds,
        AttackId::Adaptive,
        &budget,
        &mut SeedState::new(9),
    );
    assert!(err.is_err());
}

#[test]
fn attacks_never_beat_clean_accuracy_on_two_classes() {
    // With two classes the true-class probability (cross-entropy attack) and
    // the rival-minus-true margin (adaptive attack on these anti-symmetric
    // heads) are both monotone in the same scalar, so best-iterate attacks
    // can only lose accuracy relative to clean inputs.
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let ds = toy_set(25);
    let standard = standard_accuracy(model, &ds).unwrap();
    let template = AttackBudget::evaluation(NormKind::L2, 0.3);
    for attack in [AttackId::UntargetedCe, AttackId::Adaptive] {
        let sweep = epsilon_sweep(model, &ds, attack, &template, &[0.0, 0.1, 0.3], 11).unwrap();
        assert_eq!(sweep[0].accuracy, standard, "{attack:?} at ε = 0");
        for point in &sweep {
            assert!(
                point.accuracy <= standard + 1e-12,
                "{attack:?} at ε = {}: {} beats clean {standard}",
                point.epsilon,
                point.accuracy
            );
        }
        let again = epsilon_sweep(model, &ds, attack, &template, &[0.0, 0.1, 0.3], 11).unwrap();
        assert_eq!(sweep, again);
    }
}

#[test]
fn epsilon_sweep_rejects_unsorted_lists() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let ds = toy_set(3);
    let template = AttackBudget::evaluation(NormKind::L2, 0.1);
    let err = epsilon_sweep(model, &ds, AttackId::UntargetedCe, &template, &[0.3, 0.1], 1);
    assert!(err.is_err());
    let empty =
        epsilon_sweep(model, &ds, AttackId::UntargetedCe, &template, &[], 1).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn attack_id_serializes_kebab_case() {
    assert_eq!(serde_json::to_string(&AttackId::UntargetedCe).unwrap(), "\"untargeted-ce\"");
    assert_eq!(serde_json::to_string(&AttackId::Adaptive).unwrap(), "\"adaptive\"");
}

#[test]
fn evaluate_report_round_trips() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let ds = toy_set(6);
    let template = AttackBudget::evaluation(NormKind::L2, 0.2);
    let attacks = [AttackId::UntargetedCe, AttackId::Adaptive];
    let mut report = evaluate(model, "generative", &ds, &attacks, &template, &[0.0, 0.2], 5).unwrap();

    assert_eq!(report.robust.len(), 4);
    assert_eq!(report.dataset_fingerprint, ds.fingerprint());
    assert_eq!(report.standard_accuracy, standard_accuracy(model, &ds).unwrap());
    assert!(report.wall_clock_secs.unwrap() >= 0.0);

    // Timing is measurement noise, not a result: drop it and the key must
    // vanish so serialized reports hash identically across reruns.
    report.wall_clock_secs = None;
    let json = serde_json::to_string(&report).unwrap();
    assert!(!json.contains("wall_clock_secs"));
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.robust, report.robust);
    assert_eq!(back.per_class_accuracy, report.per_class_accuracy);
    assert_eq!(back.standard_accuracy, report.standard_accuracy);
    assert_eq!(back.model, report.model);
    assert_eq!(back.seed, report.seed);
    assert!(back.wall_clock_secs.is_none());
}
