use ndarray::arr1;

use super::*;
use crate::attack::{NormKind, ScalarObjective};
use crate::classifier::GenerativeClassifier;
use crate::nn::arch::{build_network, ArchId};
use crate::testkit::rand_images;
use crate::train::BinaryHead;

fn stats_1d(mean: f64, var: f64) -> GaussianStats {
    GaussianStats::new(arr1(&[mean]), Array2::from_elem((1, 1), var), 2).unwrap()
}

fn random_stats(d: usize, rng: &mut SeedState) -> GaussianStats {
    // Σ = A Aᵀ/d + 0.1 I is comfortably positive definite.
    let a = Array2::from_shape_fn((d, d), |_| rng.normal());
    let mut cov = a.dot(&a.t()) / d as f64;
    for i in 0..d {
        cov[[i, i]] += 0.1;
    }
    let mean = Array1::from_shape_fn(d, |_| rng.normal());
    GaussianStats::new(mean, cov, 10).unwrap()
}

#[test]
fn fit_matches_hand_computed_two_point_example() {
    let mut x = ImageBatch::zeros((2, 1, 1, 2));
    x[[1, 0, 0, 0]] = 2.0;
    x[[1, 0, 0, 1]] = 2.0;
    let s = fit_class_gaussian(&x).unwrap();
    assert_eq!(s.count, 2);
    assert_eq!(s.image_shape, Some((1, 1, 2)));
    assert_eq!(s.mean, arr1(&[1.0, 1.0]));
    // Unbiased covariance of {(0,0), (2,2)} is [[2,2],[2,2]], plus the ridge
    // on the diagonal.
    for i in 0..2 {
        for j in 0..2 {
            let want = 2.0 + if i == j { COV_SHRINKAGE } else { 0.0 };
            assert!((s.covariance[[i, j]] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn fit_of_identical_samples_leaves_only_the_ridge() {
    let x = ImageBatch::from_elem((5, 1, 2, 2), 0.5);
    let s = fit_class_gaussian(&x).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { COV_SHRINKAGE } else { 0.0 };
            assert!((s.covariance[[i, j]] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn fit_needs_two_samples() {
    assert!(fit_class_gaussian(&ImageBatch::zeros((1, 1, 2, 2))).is_err());
    assert!(fit_class_gaussian(&ImageBatch::zeros((0, 1, 2, 2))).is_err());
}

#[test]
fn fit_matches_direct_two_pass_computation() {
    let mut rng = SeedState::new(21);
    let x = rand_images(20, (1, 2, 3), &mut rng);
    let s = fit_class_gaussian(&x).unwrap();
    let rows = flatten(&x);
    let (n, d) = (rows.nrows(), rows.ncols());
    for j in 0..d {
        let mu: f64 = rows.column(j).sum() / n as f64;
        assert!((s.mean[j] - mu).abs() < 1e-10);
    }
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (rows[[r, i]] - s.mean[i]) * (rows[[r, j]] - s.mean[j]);
            }
            let mut want = acc / (n - 1) as f64;
            if i == j {
                want += COV_SHRINKAGE;
            }
            assert!((s.covariance[[i, j]] - want).abs() < 1e-10, "entry ({i}, {j})");
        }
    }
}

#[test]
fn fitted_covariance_is_positive_definite() {
    let mut rng = SeedState::new(22);
    // Fewer samples than dimensions: rank-deficient before the ridge.
    let x = rand_images(4, (1, 3, 3), &mut rng);
    let s = fit_class_gaussian(&x).unwrap();
    let eig = SymmetricEigen::new(to_dmatrix(&s.covariance));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    // PSD within roundoff before the ridge, so ≥ the ridge after, minus slack.
    assert!(min >= COV_SHRINKAGE - 1e-8, "min eigenvalue {min}");
}

#[test]
fn seeds_from_degenerate_stats_sit_at_the_mean() {
    let x = ImageBatch::from_elem((3, 1, 2, 2), 0.5);
    let s = fit_class_gaussian(&x).unwrap();
    let seeds = sample_seeds(&s, 8, &mut SeedState::new(1)).unwrap();
    assert_eq!(seeds.shape(), &[8, 1, 2, 2]);
    // Residual covariance is the ridge: per-pixel deviation has std 0.01.
    for v in seeds.iter() {
        assert!((v - 0.5).abs() < 0.1);
    }
}

#[test]
fn seed_sampling_is_deterministic_and_handles_zero() {
    let mut rng = SeedState::new(23);
    let s = fit_class_gaussian(&rand_images(6, (1, 2, 2), &mut rng)).unwrap();
    let a = sample_seeds(&s, 5, &mut SeedState::new(9)).unwrap();
    let b = sample_seeds(&s, 5, &mut SeedState::new(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let none = sample_seeds(&s, 0, &mut SeedState::new(9)).unwrap();
    assert_eq!(none.shape(), &[0, 1, 2, 2]);
}

#[test]
fn seeds_need_an_image_shape() {
    let s = stats_1d(0.0, 1.0);
    assert!(sample_seeds(&s, 3, &mut SeedState::new(1)).is_err());
}

#[test]
fn frechet_of_identical_stats_is_zero() {
    let mut rng = SeedState::new(24);
    let s = random_stats(6, &mut rng);
    assert!(frechet_distance(&s, &s).unwrap() < 1e-8);
}

#[test]
fn frechet_matches_scalar_formula() {
    // 1-D Fréchet distance is (μ₁−μ₂)² + (σ₁−σ₂)²: here 1 + (1−2)² = 2.
    let a = stats_1d(0.0, 1.0);
    let b = stats_1d(1.0, 4.0);
    assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
}

#[test]
fn frechet_matches_coordinatewise_oracle_on_diagonals() {
    let mut rng = SeedState::new(25);
    for &d in &[2usize, 8, 64] {
        let vars_a: Vec<f64> = (0..d).map(|_| 0.1 + 2.0 * rng.uniform()).collect();
        let vars_b: Vec<f64> = (0..d).map(|_| 0.1 + 2.0 * rng.uniform()).collect();
        let mean_a = Array1::from_shape_fn(d, |_| rng.normal());
        let mean_b = Array1::from_shape_fn(d, |_| rng.normal());
        let diag = |v: &[f64]| {
            Array2::from_shape_fn((d, d), |(i, j)| if i == j { v[i] } else { 0.0 })
        };
        let a = GaussianStats::new(mean_a.clone(), diag(&vars_a), 2).unwrap();
        let b = GaussianStats::new(mean_b.clone(), diag(&vars_b), 2).unwrap();
        let mut oracle = 0.0;
        for i in 0..d {
            let dm = mean_a[i] - mean_b[i];
            let ds = vars_a[i].sqrt() - vars_b[i].sqrt();
            oracle += dm * dm + ds * ds;
        }
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-6, "d = {d}: {got} vs oracle {oracle}");
    }
}

#[test]
fn frechet_is_symmetric() {
    let mut rng = SeedState::new(26);
    let a = random_stats(5, &mut rng);
    let b = random_stats(5, &mut rng);
    let ab = frechet_distance(&a, &b).unwrap();
    let ba = frechet_distance(&b, &a).unwrap();
    assert!(ab >= 0.0);
    assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
}

#[test]
fn frechet_rejects_bad_inputs() {
    let mut rng = SeedState::new(27);
    let a = random_stats(3, &mut rng);
    let b = random_stats(4, &mut rng);
    assert!(frechet_distance(&a, &b).is_err());

    // Symmetric but indefinite: eigenvalues ±1.
    let indefinite = GaussianStats::new(
        arr1(&[0.0, 0.0]),
        ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]),
        2,
    )
    .unwrap();
    let ok = random_stats(2, &mut rng);
    assert!(frechet_distance(&indefinite, &ok).is_err());
}

#[test]
fn stats_constructor_validates_shape_and_symmetry() {
    assert!(GaussianStats::new(arr1(&[0.0, 0.0]), Array2::zeros((3, 3)), 2).is_err());
    let skew = ndarray::arr2(&[[1.0, 0.5], [0.0, 1.0]]);
    assert!(GaussianStats::new(arr1(&[0.0, 0.0]), skew, 2).is_err());
    let tiny_skew = ndarray::arr2(&[[1.0, 0.5], [0.5 + 1e-10, 1.0]]);
    let s = GaussianStats::new(arr1(&[0.0, 0.0]), tiny_skew, 2).unwrap();
    assert_eq!(s.covariance[[0, 1]], s.covariance[[1, 0]]);
}

/// A head computing w·x + b over the two toy pixels.
fn toy_head(class: usize, w: [f64; 2], b: f64) -> BinaryHead {
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

fn toy_classifier() -> GenerativeClassifier {
    GenerativeClassifier::new(vec![
        toy_head(0, [-1.0, -1.0], 1.0),
        toy_head(1, [1.0, 1.0], -1.0),
    ])
    .unwrap()
}

fn no_start_budget(eps: f64) -> AttackBudget {
    let mut b = AttackBudget::evaluation(NormKind::L2, eps);
    b.random_start = false;
    b.restarts = 1;
    b
}

#[test]
fn generation_respects_budget_and_improves_the_head_score() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    // Seeds scattered around the class-0 blob.
    let mut rng = SeedState::new(30);
    let mut cloud = rand_images(10, (1, 1, 2), &mut rng);
    cloud.mapv_inplace(|v| 0.2 + 0.2 * v);
    let stats = fit_class_gaussian(&cloud).unwrap();

    let budget = no_start_budget(0.2);
    let gen =
        generate_class_samples(model, &stats, 0, 6, &budget, &mut SeedState::new(5)).unwrap();
    assert_eq!(gen.samples.shape(), gen.seeds.shape());
    assert!(gen.samples.iter().all(|v| (0.0..=1.0).contains(v)));
    let before = ScalarObjective::eval(&gc.heads()[0].net, &gen.seeds);
    let after = ScalarObjective::eval(&gc.heads()[0].net, &gen.samples);
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        assert!(a >= b, "sample {i}: score fell from {b} to {a}");
        let diff = &gen.samples.index_axis(Axis(0), i) - &gen.seeds.index_axis(Axis(0), i);
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 0.2 + 1e-9, "sample {i} moved {norm}");
    }

    let frozen =
        generate_class_samples(model, &stats, 0, 6, &no_start_budget(0.0), &mut SeedState::new(5))
            .unwrap();
    assert_eq!(frozen.samples, frozen.seeds);

    assert!(generate_class_samples(model, &stats, 2, 1, &budget, &mut SeedState::new(5)).is_err());
}

#[test]
fn generation_works_against_the_softmax_model() {
    let mut rng = SeedState::new(31);
    let net = build_network(ArchId::LinearToy, (1, 1, 2), 2, &mut rng);
    let model = ClassifierModel::Softmax(&net);
    let cloud = rand_images(8, (1, 1, 2), &mut rng);
    let stats = fit_class_gaussian(&cloud).unwrap();
    let gen = generate_class_samples(model, &stats, 1, 4, &no_start_budget(0.3), &mut rng).unwrap();
    assert_eq!(gen.samples.shape(), &[4, 1, 1, 2]);
    assert!(gen.samples.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn counterfactual_flip_tracks_the_linear_margin() {
    // The toy decision boundary is x₀ + x₁ = 1; the point (0.3, 0.3) sits at
    // L2 distance 0.4/√2 ≈ 0.283 from it. The targeted attack moves straight
    // along (1,1)/√2, so the flip happens exactly when ε crosses the margin.
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let mut x = ImageBatch::zeros((1, 1, 1, 2));
    x[[0, 0, 0, 0]] = 0.3;
    x[[0, 0, 0, 1]] = 0.3;
    assert_eq!(model.predict(&x).unwrap(), vec![0]);

    let close = counterfactual(model, &x, 1, &no_start_budget(0.25)).unwrap();
    assert!(!close.flipped[0]);
    let past = counterfactual(model, &x, 1, &no_start_budget(0.32)).unwrap();
    assert!(past.flipped[0]);
    assert!(past.norms[0] <= 0.32 + 1e-9);
}

#[test]
fn counterfactual_leaves_already_target_samples_alone() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let mut x = ImageBatch::zeros((2, 1, 1, 2));
    // Row 0 predicts class 0, row 1 predicts class 1.
    for (i, v) in [0.2, 0.8].iter().enumerate() {
        x[[i, 0, 0, 0]] = *v;
        x[[i, 0, 0, 1]] = *v;
    }
    let cf = counterfactual(model, &x, 0, &no_start_budget(0.5)).unwrap();
    assert_eq!(cf.images.index_axis(Axis(0), 0), x.index_axis(Axis(0), 0));
    assert_eq!(cf.norms[0], 0.0);
    assert!(cf.flipped[0]);
    // The other row was attacked toward class 0.
    assert!(cf.norms[1] > 0.0);
}

#[test]
fn counterfactual_zero_epsilon_reports_current_predictions() {
    let gc = toy_classifier();
    let model = ClassifierModel::Generative(&gc);
    let mut x = ImageBatch::zeros((1, 1, 1, 2));
    x[[0, 0, 0, 0]] = 0.3;
    x[[0, 0, 0, 1]] = 0.3;
    let cf = counterfactual(model, &x, 1, &no_start_budget(0.0)).unwrap();
    assert_eq!(cf.images, x);
    assert!(!cf.flipped[0]);
    let same = counterfactual(model, &x, 0, &no_start_budget(0.0)).unwrap();
    assert_eq!(same.images, x);
    assert!(same.flipped[0]);
}

#[test]
fn fid_zero_on_identical_sets_and_symmetric() {
    let mut rng = SeedState::new(33);
    let a = rand_images(12, (1, 2, 2), &mut rng);
    let b = rand_images(12, (1, 2, 2), &mut rng);
    let extractor = FeatureExtractor::FlattenPixels;
    let same = fid(&extractor, &a, &a).unwrap();
    assert_eq!(same.extractor, "flatten-pixels");
    assert!(same.value < 1e-6, "self-FID {}", same.value);
    let ab = fid(&extractor, &a, &b).unwrap().value;
    let ba = fid(&extractor, &b, &a).unwrap().value;
    assert!((ab - ba).abs() < 1e-8);
    assert!(ab > 0.0);
    assert!(fid(&extractor, &a.slice_axis(Axis(0), ndarray::Slice::from(0..1)).to_owned(), &b).is_err());
}

#[test]
fn extractors_agree_where_they_should() {
    // A linear toy network's penultimate features are the flattened pixels,
    // so all three extractors compute the same score on it; only the labels
    // differ.
    let mut rng = SeedState::new(34);
    let net = build_network(ArchId::LinearToy, (1, 2, 2), 2, &mut rng);
    let a = rand_images(10, (1, 2, 2), &mut rng);
    let b = rand_images(10, (1, 2, 2), &mut rng);
    let pixels = fid(&FeatureExtractor::FlattenPixels, &a, &b).unwrap();
    let penult = fid(&FeatureExtractor::Penultimate(&net), &a, &b).unwrap();
    let hook = |x: &ImageBatch| flatten(x);
    let external = fid(&FeatureExtractor::External(&hook), &a, &b).unwrap();
    assert_eq!(penult.extractor, "trained-classifier-penultimate");
    assert_eq!(external.extractor, "external-inception");
    assert!((pixels.value - penult.value).abs() < 1e-9);
    assert!((pixels.value - external.value).abs() < 1e-9);
}
