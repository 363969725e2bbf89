//! Sample generation, counterfactuals, and Fréchet-distance scoring.
//!
//! Class-conditional Gaussians fit in pixel space provide seed images; the
//! targeted attack pushes seeds toward a class score, which for a density
//! head means toward the class manifold. Fréchet distances compare such
//! sample sets against real data in a pluggable feature space.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::attack::{targeted_attack, AttackBudget, ClassLogit};
use crate::error::{Error, Result};
use crate::eval::ClassifierModel;
use crate::nn::Network;
use crate::rng::SeedState;
use crate::ImageBatch;

#[cfg(test)]
mod tests;

/// Ridge added to every fitted covariance. Pixel-space covariances of small
/// sample sets are rank-deficient; the ridge keeps them factorizable.
pub const COV_SHRINKAGE: f64 = 1e-4;

/// Eigenvalues of nominally-PSD matrices below this are a numeric error
/// rather than roundoff.
const EIG_FLOOR: f64 = -1e-6;

/// Mean and covariance of one sample set, with the ridge already applied.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    /// Symmetric positive definite (sample covariance plus the ridge).
    pub covariance: Array2<f64>,
    pub count: usize,
    /// (C, H, W) when fit from images; lets draws reshape back to images.
    pub image_shape: Option<(usize, usize, usize)>,
}

impl GaussianStats {
    /// Stats from explicit moments. The covariance must be square, match the
    /// mean, and be symmetric to 1e-8; it is exactly symmetrized on the way
    /// in.
    pub fn new(mean: Array1<f64>, covariance: Array2<f64>, count: usize) -> Result<GaussianStats> {
        let d = mean.len();
        if covariance.shape() != [d, d] {
            return Err(Error::argument(format!(
                "covariance {:?} for a {d}-dimensional mean",
                covariance.shape()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::argument("non-finite Gaussian statistics"));
        }
        let mut sym = covariance.clone();
        for i in 0..d {
            for j in 0..d {
                let asym = (covariance[[i, j]] - covariance[[j, i]]).abs();
                if asym > 1e-8 {
                    return Err(Error::argument(format!(
                        "covariance asymmetric at ({i}, {j}) by {asym:.3e}"
                    )));
                }
                sym[[i, j]] = 0.5 * (covariance[[i, j]] + covariance[[j, i]]);
            }
        }
        Ok(GaussianStats {
            mean,
            covariance: sym,
            count,
            image_shape: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Flatten an image batch to an (N, C·H·W) row matrix.
fn flatten(x: &ImageBatch) -> Array2<f64> {
    let n = x.shape()[0];
    let d: usize = x.shape()[1..].iter().product();
    x.to_owned().into_shape_with_order((n, d)).unwrap()
}

/// Sample mean and unbiased covariance of feature rows, plus the ridge.
fn fit_rows(rows: &Array2<f64>) -> Result<GaussianStats> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::argument(format!(
            "need at least 2 samples to fit a Gaussian, got {n}"
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite feature while fitting a Gaussian", None));
    }
    let mean = rows.mean_axis(Axis(0)).expect("n >= 2");
    let centered = rows - &mean;
    let mut covariance = centered.t().dot(&centered) / (n - 1) as f64;
    for i in 0..covariance.nrows() {
        covariance[[i, i]] += COV_SHRINKAGE;
    }
    GaussianStats::new(mean, covariance, n)
}

/// Fit a pixel-space Gaussian to one class's images.
pub fn fit_class_gaussian(samples: &ImageBatch) -> Result<GaussianStats> {
    let mut stats = fit_rows(&flatten(samples))?;
    let s = samples.shape();
    stats.image_shape = Some((s[1], s[2], s[3]));
    Ok(stats)
}

/// Draw n images from the Gaussian, clamped to [0, 1].
pub fn sample_seeds(stats: &GaussianStats, n: usize, rng: &mut SeedState) -> Result<ImageBatch> {
    let (c, h, w) = stats.image_shape.ok_or_else(|| {
        Error::argument("seed sampling needs stats fit from images, not features")
    })?;
    let d = stats.dim();
    let cov = to_dmatrix(&stats.covariance);
    let chol = Cholesky::new(cov).ok_or_else(|| {
        Error::numeric("covariance is not positive definite despite the ridge", None)
    })?;
    let l = chol.l();
    let mut out = ImageBatch::zeros((n, c, h, w));
    for i in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.normal());
        let x = &l * z;
        for (j, dst) in out.index_axis_mut(Axis(0), i).iter_mut().enumerate() {
            *dst = (stats.mean[j] + x[j]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Seed images plus their attacked versions.
#[derive(Debug, Clone)]
pub struct GeneratedSamples {
    pub seeds: ImageBatch,
    pub samples: ImageBatch,
}

/// Generate class-k samples: draw seeds from the class Gaussian, then push
/// them toward the class score with a targeted attack.
pub fn generate_class_samples(
    model: ClassifierModel<'_>,
    stats: &GaussianStats,
    k: usize,
    n: usize,
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<GeneratedSamples> {
    if k >= model.num_classes() {
        return Err(Error::argument(format!(
            "class {k} out of range for {} classes",
            model.num_classes()
        )));
    }
    let seeds = sample_seeds(stats, n, &mut rng.fork("seeds"))?;
    let mut arng = rng.fork("attack");
    let res = match model {
        ClassifierModel::Generative(gc) => {
            targeted_attack(&gc.heads()[k].net, &seeds, budget, &mut arng)?
        }
        ClassifierModel::Softmax(net) => {
            let score = ClassLogit { model: net, class: k };
            targeted_attack(&score, &seeds, budget, &mut arng)?
        }
    };
    Ok(GeneratedSamples {
        seeds,
        samples: res.adversarial,
    })
}

/// Counterfactual images with per-sample bookkeeping.
#[derive(Debug, Clone)]
pub struct Counterfactuals {
    pub images: ImageBatch,
    /// Perturbation norm actually spent per sample.
    pub norms: Vec<f64>,
    /// Whether the final prediction is the target class.
    pub flipped: Vec<bool>,
}

/// Minimum-change push of real inputs toward a target class. Samples already
/// predicted as the target are returned unchanged; the rest get a targeted
/// attack on the target's score. Deterministic for a fixed budget.
pub fn counterfactual(
    model: ClassifierModel<'_>,
    x: &ImageBatch,
    target: usize,
    budget: &AttackBudget,
) -> Result<Counterfactuals> {
    if target >= model.num_classes() {
        return Err(Error::argument(format!(
            "target class {target} out of range for {} classes",
            model.num_classes()
        )));
    }
    let before = model.predict(x)?;
    let mut rng = SeedState::new(0).fork("counterfactual");
    let res = match model {
        ClassifierModel::Generative(gc) => {
            targeted_attack(&gc.heads()[target].net, x, budget, &mut rng)?
        }
        ClassifierModel::Softmax(net) => {
            let score = ClassLogit { model: net, class: target };
            targeted_attack(&score, x, budget, &mut rng)?
        }
    };
    let mut images = res.adversarial;
    let mut norms = res.norms;
    for (i, &pred) in before.iter().enumerate() {
        if pred == target {
            images
                .index_axis_mut(Axis(0), i)
                .assign(&x.index_axis(Axis(0), i));
            norms[i] = 0.0;
        }
    }
    let after = model.predict(&images)?;
    let flipped = after.iter().map(|&p| p == target).collect();
    Ok(Counterfactuals { images, norms, flipped })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [EIG_FLOOR, 0) clamp to zero; anything lower is an error.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < EIG_FLOOR {
            return Err(Error::numeric(
                format!("{what} has eigenvalue {v:.3e} below {EIG_FLOOR:.0e}"),
                None,
            ));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance ‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^½), with the matrix root
/// computed in the symmetrized form (Σ₁^½ Σ₂ Σ₁^½)^½.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "Fréchet distance between {}- and {}-dimensional stats",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ca = to_dmatrix(&a.covariance);
    let cb = to_dmatrix(&b.covariance);
    let sa = psd_sqrt(&ca, "first covariance")?;
    let mut m = &sa * &cb * &sa;
    // Exact symmetry for the eigensolver; products of symmetric matrices
    // carry roundoff asymmetry.
    let mt = m.transpose();
    m = (&m + &mt) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut trace_sqrt = 0.0;
    for v in eig.eigenvalues.iter() {
        if *v < EIG_FLOOR {
            return Err(Error::numeric(
                format!("covariance product has eigenvalue {v:.3e} below {EIG_FLOOR:.0e}"),
                None,
            ));
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    let dist = mean_term + ca.trace() + cb.trace() - 2.0 * trace_sqrt;
    Ok(dist.max(0.0))
}

/// Feature space for Fréchet scoring. Scores are only comparable when they
/// come from the same extractor, so every score carries the extractor id.
pub enum FeatureExtractor<'a> {
    /// Raw pixels, flattened.
    FlattenPixels,
    /// Features entering the final linear layer of a trained network.
    Penultimate(&'a Network),
    /// Externally computed features (e.g. an Inception network run out of
    /// process), plugged in as a closure.
    External(&'a dyn Fn(&ImageBatch) -> Array2<f64>),
}

impl FeatureExtractor<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            FeatureExtractor::FlattenPixels => "flatten-pixels",
            FeatureExtractor::Penultimate(_) => "trained-classifier-penultimate",
            FeatureExtractor::External(_) => "external-inception",
        }
    }

    pub fn extract(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        let feats = match self {
            FeatureExtractor::FlattenPixels => flatten(x),
            FeatureExtractor::Penultimate(net) => net.penultimate(x),
            FeatureExtractor::External(f) => f(x),
        };
        if let Some(bad) = feats.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("non-finite feature from extractor {}", self.id()),
                Some(bad / feats.ncols().max(1)),
            ));
        }
        Ok(feats)
    }
}

/// A Fréchet distance labeled by the feature space it was computed in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FidScore {
    pub extractor: String,
    pub value: f64,
}

/// Fréchet distance between two image sets in the extractor's feature space.
pub fn fid(extractor: &FeatureExtractor<'_>, set_a: &ImageBatch, set_b: &ImageBatch) -> Result<FidScore> {
    let fa = fit_rows(&extractor.extract(set_a)?)?;
    let fb = fit_rows(&extractor.extract(set_b)?)?;
    Ok(FidScore {
        extractor: extractor.id().to_string(),
        value: frechet_distance(&fa, &fb)?,
    })
}
