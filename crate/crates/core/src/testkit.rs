//! Shared helpers for unit and integration tests (random tensors, error
//! metrics, finite differences). Not part of the stable API.

use ndarray::Array4;

use crate::rng::SeedState;
use crate::ImageBatch;

/// Random image batch with pixels away from the [0,1] boundary so projection
/// and clipping stay inactive in gradient tests.
pub fn rand_images(n: usize, shape: (usize, usize, usize), rng: &mut SeedState) -> ImageBatch {
    let (c, h, w) = shape;
    Array4::from_shape_fn((n, c, h, w), |_| rng.uniform_in(0.25, 0.75))
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central finite difference of `f` at `x` along coordinate `idx`.
pub fn central_diff(mut f: impl FnMut(&ImageBatch) -> f64, x: &ImageBatch, idx: usize, eps: f64) -> f64 {
    let mut xp = x.clone();
    xp.as_slice_mut().unwrap()[idx] += eps;
    let mut xm = x.clone();
    xm.as_slice_mut().unwrap()[idx] -= eps;
    (f(&xp) - f(&xm)) / (2.0 * eps)
}

/// A linear score w·x + b with closed-form maxima over norm balls, the
/// exactness oracle for the PGD optimizer.
pub struct LinearScore {
    pub w: ndarray::Array3<f64>,
    pub b: f64,
}

impl LinearScore {
    pub fn random(shape: (usize, usize, usize), rng: &mut SeedState) -> LinearScore {
        let (c, h, w) = shape;
        LinearScore {
            w: ndarray::Array3::from_shape_fn((c, h, w), |_| rng.normal()),
            b: rng.normal(),
        }
    }

    pub fn value(&self, x: &ndarray::ArrayView3<f64>) -> f64 {
        self.b + x.iter().zip(self.w.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    /// max over the L2 ball of radius ε around x (ignoring the [0,1] box).
    pub fn l2_max(&self, x: &ndarray::ArrayView3<f64>, eps: f64) -> f64 {
        let norm = self.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.value(x) + eps * norm
    }

    /// max over the L∞ ball of radius ε around x (ignoring the [0,1] box).
    pub fn linf_max(&self, x: &ndarray::ArrayView3<f64>, eps: f64) -> f64 {
        let norm = self.w.iter().map(|v| v.abs()).sum::<f64>();
        self.value(x) + eps * norm
    }
}

impl crate::attack::ScalarObjective for LinearScore {
    fn eval(&self, x: &ImageBatch) -> Vec<f64> {
        x.axis_iter(ndarray::Axis(0)).map(|r| self.value(&r)).collect()
    }

    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch) {
        let vals = self.eval(x);
        let mut g = x.clone();
        for mut row in g.axis_iter_mut(ndarray::Axis(0)) {
            row.assign(&self.w);
        }
        (vals, g)
    }
}
