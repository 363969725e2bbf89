//! Layer primitives with explicit forward and backward passes.
//!
//! Convolution is im2col + GEMM; every backward pass is written against the
//! exact forward computation so analytic gradients match finite differences
//! at 64-bit precision.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};

use crate::ImageBatch;

/// Whether batch-norm layers use batch statistics (training) or running
/// statistics (inference/attacks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// (d_weight, d_bias) from a backward pass, when parameter gradients were
/// requested.
pub type MatGrads = Option<(Array2<f64>, Array1<f64>)>;

/// (d_gamma, d_beta) per channel from a batch-norm backward pass.
pub type ChannelGrads = Option<(Array1<f64>, Array1<f64>)>;

/// Feature tensor flowing through a layer stack: image-shaped before
/// flattening, matrix-shaped after.
#[derive(Debug, Clone)]
pub enum Feat {
    Img(ImageBatch),
    Flat(Array2<f64>),
}

impl Feat {
    pub fn img(&self) -> &ImageBatch {
        match self {
            Feat::Img(x) => x,
            Feat::Flat(_) => panic!("expected image features, found flat"),
        }
    }

    pub fn flat(&self) -> &Array2<f64> {
        match self {
            Feat::Flat(x) => x,
            Feat::Img(_) => panic!("expected flat features, found image"),
        }
    }

    pub fn into_img(self) -> ImageBatch {
        match self {
            Feat::Img(x) => x,
            Feat::Flat(_) => panic!("expected image features, found flat"),
        }
    }

    pub fn into_flat(self) -> Array2<f64> {
        match self {
            Feat::Flat(x) => x,
            Feat::Img(_) => panic!("expected flat features, found image"),
        }
    }

    pub fn batch_len(&self) -> usize {
        match self {
            Feat::Img(x) => x.shape()[0],
            Feat::Flat(x) => x.nrows(),
        }
    }
}

/// Identification of a parameter or state tensor inside a network.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    /// Optimized by SGD.
    pub trainable: bool,
    /// Subject to weight decay (weights yes, biases and norm parameters no).
    pub decay: bool,
}

pub type VisitFn<'v> = dyn FnMut(TensorSpec, ArrayViewD<'_, f64>) + 'v;
pub type VisitMutFn<'v> = dyn FnMut(TensorSpec, ArrayViewMutD<'_, f64>) + 'v;

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution with square kernel, zero padding, and uniform stride.
/// The weight is stored GEMM-ready as (C_out, C_in * k * k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }
}

/// Unfold image patches into a (N*Ho*Wo, C*k*k) matrix.
fn im2col(x: &ImageBatch, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let ckk = c * k * k;
    let xs = x.as_slice().expect("image batch must be standard layout");
    let mut cols = Array2::<f64>::zeros((n * ho * wo, ckk));
    let cs = cols.as_slice_mut().unwrap();
    for ni in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((ni * ho + oh) * wo + ow) * ckk;
                for ci in 0..c {
                    let x_base = (ni * c + ci) * h * w;
                    for kh in 0..k {
                        let ih = oh * stride + kh;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        let col_base = row + (ci * k + kh) * k;
                        for kw in 0..k {
                            let iw = ow * stride + kw;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            cs[col_base + kw] = xs[x_base + ih * w + (iw - pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-gradient matrix back onto the input, accumulating overlaps.
fn col2im(
    dcols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> ImageBatch {
    let (n, c, h, w) = shape;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let ckk = c * k * k;
    let ds = dcols.as_slice().expect("gradient columns must be standard layout");
    let mut dx = Array4::<f64>::zeros(shape);
    let xs = dx.as_slice_mut().unwrap();
    for ni in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((ni * ho + oh) * wo + ow) * ckk;
                for ci in 0..c {
                    let x_base = (ni * c + ci) * h * w;
                    for kh in 0..k {
                        let ih = oh * stride + kh;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        let col_base = row + (ci * k + kh) * k;
                        for kw in 0..k {
                            let iw = ow * stride + kw;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            xs[x_base + ih * w + (iw - pad)] += ds[col_base + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Reshape (N,C,Ho,Wo) gradients to the (N*Ho*Wo, C) layout of the GEMM output.
fn to_rows(g: &ImageBatch) -> Array2<f64> {
    let (n, c, ho, wo) = g.dim();
    let perm = g.view().permuted_axes([0, 2, 3, 1]);
    let flat = perm
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * ho * wo, c))
        .unwrap();
    flat
}

fn from_rows(rows: Array2<f64>, n: usize, c: usize, ho: usize, wo: usize) -> ImageBatch {
    let img = rows
        .into_shape_with_order((n, ho, wo, c))
        .unwrap()
        .permuted_axes([0, 3, 1, 2]);
    img.as_standard_layout().into_owned()
}

impl Conv2d {
    pub fn forward(&self, x: &ImageBatch) -> (ImageBatch, Array2<f64>) {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.padding);
        let mut out_rows = cols.dot(&self.weight.t());
        out_rows += &self.bias;
        let out = from_rows(out_rows, n, self.out_channels, ho, wo);
        (out, cols)
    }

    /// Returns (d_input, d_weight, d_bias).
    pub fn backward(
        &self,
        gout: &ImageBatch,
        cols: &Array2<f64>,
        x_shape: (usize, usize, usize, usize),
        want_params: bool,
    ) -> (ImageBatch, MatGrads) {
        let g_rows = to_rows(gout);
        let params = if want_params {
            let dw = g_rows.t().dot(cols);
            let db = g_rows.sum_axis(Axis(0));
            Some((dw, db))
        } else {
            None
        };
        let dcols = g_rows.dot(&self.weight);
        let dx = col2im(&dcols, x_shape, self.kernel, self.stride, self.padding);
        (dx, params)
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>, // (out, in)
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(
        &self,
        gout: &Array2<f64>,
        x: &Array2<f64>,
        want_params: bool,
    ) -> (Array2<f64>, MatGrads) {
        let params = if want_params {
            let dw = gout.t().dot(x);
            let db = gout.sum_axis(Axis(0));
            Some((dw, db))
        } else {
            None
        };
        (gout.dot(&self.weight), params)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
        }
    }

    /// Forward pass. In train mode normalization uses batch statistics; the
    /// cache carries what the backward pass and the running-stat update need.
    pub fn forward(&self, x: &ImageBatch, mode: Mode) -> (ImageBatch, BnCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(1), ci);
                    let mu = ch.sum() / m;
                    mean[ci] = mu;
                    var[ci] = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let invstd = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut x_hat = x.clone();
        for ci in 0..c {
            let mu = mean[ci];
            let is = invstd[ci];
            x_hat
                .index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = x_hat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + b);
        }
        (
            y,
            BnCache {
                x_hat,
                invstd,
                batch_mean: mean,
                batch_var: var,
                batch_stats: mode == Mode::Train,
                m,
            },
        )
    }

    pub fn backward(
        &self,
        gout: &ImageBatch,
        cache: &BnCache,
        want_params: bool,
    ) -> (ImageBatch, ChannelGrads) {
        let (_, c, _, _) = gout.dim();
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let g = gout.index_axis(Axis(1), ci);
            let xh = cache.x_hat.index_axis(Axis(1), ci);
            dgamma[ci] = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dbeta[ci] = g.sum();
        }
        let mut dx = gout.clone();
        if cache.batch_stats {
            // Batch statistics depend on x, which adds the mean/variance terms.
            let m = cache.m;
            for ci in 0..c {
                let coef = self.gamma[ci] * cache.invstd[ci] / m;
                let sg = dbeta[ci];
                let sgx = dgamma[ci];
                let xh = cache.x_hat.index_axis(Axis(1), ci);
                let mut d = dx.index_axis_mut(Axis(1), ci);
                for (dv, &xhv) in d.iter_mut().zip(xh.iter()) {
                    *dv = coef * (m * *dv - sg - xhv * sgx);
                }
            }
        } else {
            for ci in 0..c {
                let coef = self.gamma[ci] * cache.invstd[ci];
                dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * coef);
            }
        }
        let params = want_params.then_some((dgamma, dbeta));
        (dx, params)
    }

    /// Fold the cached batch statistics into the running estimates (one call
    /// per optimizer step). Uses the unbiased variance for the running value.
    pub fn update_running(&mut self, cache: &BnCache) {
        if !cache.batch_stats {
            return;
        }
        let m = cache.m;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let mom = self.momentum;
        for ci in 0..self.running_mean.len() {
            self.running_mean[ci] =
                (1.0 - mom) * self.running_mean[ci] + mom * cache.batch_mean[ci];
            self.running_var[ci] =
                (1.0 - mom) * self.running_var[ci] + mom * cache.batch_var[ci] * unbias;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: ImageBatch,
    pub invstd: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub batch_stats: bool,
    pub m: f64,
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Ties pick the first (lowest-index) cell.
pub fn maxpool2_forward(x: &ImageBatch) -> (ImageBatch, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((n, c, ho, wo));
    let mut argmax = vec![0u32; n * c * ho * wo];
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_idx = base + (2 * oh) * w + 2 * ow;
                    let mut best = xs[best_idx];
                    for (dh, dw) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + (2 * oh + dh) * w + 2 * ow + dw;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                    ys[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool2_backward(
    gout: &ImageBatch,
    argmax: &[u32],
    in_shape: (usize, usize, usize, usize),
) -> ImageBatch {
    let mut dx = Array4::<f64>::zeros(in_shape);
    let ds = dx.as_slice_mut().unwrap();
    let gs = gout.as_slice().unwrap();
    for (g, &idx) in gs.iter().zip(argmax.iter()) {
        ds[idx as usize] += *g;
    }
    dx
}

/// Mean over the spatial dimensions: (N,C,H,W) -> (N,C).
pub fn global_avgpool_forward(x: &ImageBatch) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[(ni, ci)] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() / m;
        }
    }
    y
}

pub fn global_avgpool_backward(
    gout: &Array2<f64>,
    in_shape: (usize, usize, usize, usize),
) -> ImageBatch {
    let (n, c, h, w) = in_shape;
    let m = (h * w) as f64;
    let mut dx = Array4::<f64>::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            let g = gout[(ni, ci)] / m;
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}
