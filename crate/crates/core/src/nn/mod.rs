//! Minimal neural-network stack with exact analytic gradients.
//!
//! Networks are layer sequences over f64 tensors. Both parameter gradients
//! (for SGD training) and input gradients (for PGD attacks) come from the
//! same backward pass, so the attack and training code paths share one
//! correctness story, testable against finite differences.

pub mod arch;
pub mod io;
pub mod layers;
pub mod sgd;

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, Axis};

use crate::ImageBatch;
pub use arch::ArchId;
pub use layers::{Conv2d, Feat, Linear, Mode, TensorSpec};
use layers::{BatchNorm2d, BnCache, VisitFn, VisitMutFn};

/// One layer of a [`Network`].
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    ReLU,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    Linear(Linear),
    /// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        main: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Per-layer forward state required by the backward pass.
pub enum Cache {
    Conv {
        cols: Array2<f64>,
        x_shape: (usize, usize, usize, usize),
    },
    Bn(BnCache),
    ReluMask(Feat),
    MaxPool {
        argmax: Vec<u32>,
        in_shape: (usize, usize, usize, usize),
    },
    Gap {
        in_shape: (usize, usize, usize, usize),
    },
    FlattenShape {
        in_shape: (usize, usize, usize, usize),
    },
    LinearInput(Array2<f64>),
    Residual {
        main: Vec<Cache>,
        shortcut: Vec<Cache>,
        out_mask: ImageBatch,
    },
    None,
}

/// Forward-pass record for one network invocation.
pub struct Tape(Vec<Cache>);

/// Named parameter gradients, keyed by the stable tensor names used for
/// checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub HashMap<String, ArrayD<f64>>);

impl Gradients {
    fn insert(&mut self, name: String, g: ArrayD<f64>) {
        self.0.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.0.get(name)
    }

    /// Elementwise sum, consuming the other side.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.0 {
            match self.0.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.0.insert(name, g);
                }
            }
        }
    }
}

/// A feed-forward network: image batch in, (N, out_dim) scores out.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub in_shape: (usize, usize, usize),
    pub out_dim: usize,
    pub arch: ArchId,
}

impl Network {
    /// Full forward pass recording the tape needed for [`Network::backward`].
    pub fn forward(&self, x: &ImageBatch, mode: Mode) -> (Array2<f64>, Tape) {
        let (feat, caches) = forward_stack(&self.layers, Feat::Img(x.clone()), mode, true);
        (feat.into_flat(), Tape(caches))
    }

    /// Cache-free forward pass in eval mode for prediction and scoring.
    pub fn infer(&self, x: &ImageBatch) -> Array2<f64> {
        let (feat, _) = forward_stack(&self.layers, Feat::Img(x.clone()), Mode::Eval, false);
        feat.into_flat()
    }

    /// Backward pass from output-gradients `gout` (N, out_dim). Returns the
    /// gradient with respect to the input pixels and, when requested, the
    /// parameter gradients.
    pub fn backward(
        &self,
        tape: &Tape,
        gout: &Array2<f64>,
        want_params: bool,
    ) -> (ImageBatch, Option<Gradients>) {
        let mut grads = want_params.then(Gradients::default);
        let gin = backward_stack(
            &self.layers,
            &tape.0,
            Feat::Flat(gout.clone()),
            "",
            &mut grads,
        );
        (gin.into_img(), grads)
    }

    /// Features entering the final linear layer (eval mode).
    pub fn penultimate(&self, x: &ImageBatch) -> Array2<f64> {
        let last_linear = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Linear(_)))
            .expect("network has no linear output layer");
        let (feat, _) = forward_stack(
            &self.layers[..last_linear],
            Feat::Img(x.clone()),
            Mode::Eval,
            false,
        );
        match feat {
            Feat::Flat(f) => f,
            Feat::Img(img) => {
                let n = img.shape()[0];
                let d: usize = img.shape()[1..].iter().product();
                img.into_shape_with_order((n, d)).unwrap()
            }
        }
    }

    /// Fold batch statistics recorded on `tape` into batch-norm running
    /// estimates. A no-op for tapes recorded in eval mode or norm-free nets.
    pub fn apply_bn_updates(&mut self, tape: &Tape) {
        update_running_stack(&mut self.layers, &tape.0);
    }

    /// Visit every parameter and state tensor in a stable order.
    pub fn visit_tensors(&self, f: &mut VisitFn<'_>) {
        visit_stack(&self.layers, "", f);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut VisitMutFn<'_>) {
        visit_stack_mut(&mut self.layers, "", f);
    }

    /// Snapshot of all tensors (parameters plus batch-norm running stats).
    pub fn snapshot(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |spec, view| out.push((spec.name, view.to_owned())));
        out
    }

    /// Restore tensors from a snapshot produced by [`Network::snapshot`].
    pub fn restore(&mut self, snap: &[(String, ArrayD<f64>)]) {
        let map: HashMap<&str, &ArrayD<f64>> =
            snap.iter().map(|(n, t)| (n.as_str(), t)).collect();
        self.visit_tensors_mut(&mut |spec, mut view| {
            let src = map
                .get(spec.name.as_str())
                .unwrap_or_else(|| panic!("snapshot missing tensor {}", spec.name));
            view.assign(&src.view());
        });
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |spec, view| {
            if spec.trainable {
                n += view.len();
            }
        });
        n
    }
}

fn forward_stack(
    layers: &[Layer],
    mut feat: Feat,
    mode: Mode,
    record: bool,
) -> (Feat, Vec<Cache>) {
    let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
    for layer in layers {
        let (next, cache) = forward_layer(layer, feat, mode, record);
        feat = next;
        if record {
            caches.push(cache);
        }
    }
    (feat, caches)
}

fn forward_layer(layer: &Layer, feat: Feat, mode: Mode, record: bool) -> (Feat, Cache) {
    match layer {
        Layer::Conv2d(conv) => {
            let x = feat.into_img();
            let x_shape = x.dim();
            let (y, cols) = conv.forward(&x);
            let cache = if record {
                Cache::Conv { cols, x_shape }
            } else {
                Cache::None
            };
            (Feat::Img(y), cache)
        }
        Layer::BatchNorm2d(bn) => {
            let x = feat.into_img();
            let (y, c) = bn.forward(&x, mode);
            (Feat::Img(y), if record { Cache::Bn(c) } else { Cache::None })
        }
        Layer::ReLU => {
            let y = match feat {
                Feat::Img(x) => Feat::Img(x.mapv(|v| v.max(0.0))),
                Feat::Flat(x) => Feat::Flat(x.mapv(|v| v.max(0.0))),
            };
            let cache = if record {
                Cache::ReluMask(y.clone())
            } else {
                Cache::None
            };
            (y, cache)
        }
        Layer::MaxPool2 => {
            let x = feat.into_img();
            let in_shape = x.dim();
            let (y, argmax) = layers::maxpool2_forward(&x);
            let cache = if record {
                Cache::MaxPool { argmax, in_shape }
            } else {
                Cache::None
            };
            (Feat::Img(y), cache)
        }
        Layer::GlobalAvgPool => {
            let x = feat.into_img();
            let in_shape = x.dim();
            let y = layers::global_avgpool_forward(&x);
            let cache = if record {
                Cache::Gap { in_shape }
            } else {
                Cache::None
            };
            (Feat::Flat(y), cache)
        }
        Layer::Flatten => {
            let x = feat.into_img();
            let in_shape = x.dim();
            let (n, c, h, w) = in_shape;
            let y = x.into_shape_with_order((n, c * h * w)).unwrap();
            let cache = if record {
                Cache::FlattenShape { in_shape }
            } else {
                Cache::None
            };
            (Feat::Flat(y), cache)
        }
        Layer::Linear(lin) => {
            let x = feat.into_flat();
            let y = lin.forward(&x);
            let cache = if record {
                Cache::LinearInput(x)
            } else {
                Cache::None
            };
            (Feat::Flat(y), cache)
        }
        Layer::Residual { main, shortcut } => {
            let x = feat.into_img();
            let (ym, main_c) = forward_stack(main, Feat::Img(x.clone()), mode, record);
            let (ys, short_c) = forward_stack(shortcut, Feat::Img(x), mode, record);
            let mut y = ym.into_img();
            y += ys.img();
            y.mapv_inplace(|v| v.max(0.0));
            let cache = if record {
                Cache::Residual {
                    main: main_c,
                    shortcut: short_c,
                    out_mask: y.clone(),
                }
            } else {
                Cache::None
            };
            (Feat::Img(y), cache)
        }
    }
}

fn backward_stack(
    layers: &[Layer],
    caches: &[Cache],
    mut grad: Feat,
    prefix: &str,
    grads: &mut Option<Gradients>,
) -> Feat {
    for (i, layer) in layers.iter().enumerate().rev() {
        grad = backward_layer(layer, &caches[i], grad, &layer_name(prefix, i), grads);
    }
    grad
}

fn backward_layer(
    layer: &Layer,
    cache: &Cache,
    grad: Feat,
    name: &str,
    grads: &mut Option<Gradients>,
) -> Feat {
    match (layer, cache) {
        (Layer::Conv2d(conv), Cache::Conv { cols, x_shape }) => {
            let g = grad.into_img();
            let (dx, params) = conv.backward(&g, cols, *x_shape, grads.is_some());
            if let (Some(gr), Some((dw, db))) = (grads.as_mut(), params) {
                gr.insert(format!("{name}.weight"), dw.into_dyn());
                gr.insert(format!("{name}.bias"), db.into_dyn());
            }
            Feat::Img(dx)
        }
        (Layer::BatchNorm2d(bn), Cache::Bn(c)) => {
            let g = grad.into_img();
            let (dx, params) = bn.backward(&g, c, grads.is_some());
            if let (Some(gr), Some((dgamma, dbeta))) = (grads.as_mut(), params) {
                gr.insert(format!("{name}.gamma"), dgamma.into_dyn());
                gr.insert(format!("{name}.beta"), dbeta.into_dyn());
            }
            Feat::Img(dx)
        }
        (Layer::ReLU, Cache::ReluMask(mask)) => match (grad, mask) {
            (Feat::Img(mut g), Feat::Img(m)) => {
                g.zip_mut_with(m, |gv, &mv| {
                    if mv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                Feat::Img(g)
            }
            (Feat::Flat(mut g), Feat::Flat(m)) => {
                g.zip_mut_with(m, |gv, &mv| {
                    if mv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                Feat::Flat(g)
            }
            _ => panic!("relu mask/grad feature kind mismatch"),
        },
        (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
            let g = grad.into_img();
            Feat::Img(layers::maxpool2_backward(&g, argmax, *in_shape))
        }
        (Layer::GlobalAvgPool, Cache::Gap { in_shape }) => {
            let g = grad.into_flat();
            Feat::Img(layers::global_avgpool_backward(&g, *in_shape))
        }
        (Layer::Flatten, Cache::FlattenShape { in_shape }) => {
            let g = grad.into_flat();
            Feat::Img(g.into_shape_with_order(*in_shape).unwrap())
        }
        (Layer::Linear(lin), Cache::LinearInput(x)) => {
            let g = grad.into_flat();
            let (dx, params) = lin.backward(&g, x, grads.is_some());
            if let (Some(gr), Some((dw, db))) = (grads.as_mut(), params) {
                gr.insert(format!("{name}.weight"), dw.into_dyn());
                gr.insert(format!("{name}.bias"), db.into_dyn());
            }
            Feat::Flat(dx)
        }
        (
            Layer::Residual { main, shortcut },
            Cache::Residual {
                main: main_c,
                shortcut: short_c,
                out_mask,
            },
        ) => {
            let mut g = grad.into_img();
            g.zip_mut_with(out_mask, |gv, &mv| {
                if mv <= 0.0 {
                    *gv = 0.0;
                }
            });
            let dm = backward_stack(
                main,
                main_c,
                Feat::Img(g.clone()),
                &format!("{name}.main"),
                grads,
            );
            let ds = backward_stack(
                shortcut,
                short_c,
                Feat::Img(g),
                &format!("{name}.short"),
                grads,
            );
            let mut dx = dm.into_img();
            dx += ds.img();
            Feat::Img(dx)
        }
        _ => panic!("layer/cache mismatch in backward pass"),
    }
}

fn layer_name(prefix: &str, index: usize) -> String {
    if prefix.is_empty() {
        format!("l{index}")
    } else {
        format!("{prefix}.l{index}")
    }
}

fn visit_stack(layers: &[Layer], prefix: &str, f: &mut VisitFn<'_>) {
    for (i, layer) in layers.iter().enumerate() {
        let name = layer_name(prefix, i);
        match layer {
            Layer::Conv2d(conv) => {
                f(
                    TensorSpec {
                        name: format!("{name}.weight"),
                        trainable: true,
                        decay: true,
                    },
                    conv.weight.view().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.bias"),
                        trainable: true,
                        decay: false,
                    },
                    conv.bias.view().into_dyn(),
                );
            }
            Layer::Linear(lin) => {
                f(
                    TensorSpec {
                        name: format!("{name}.weight"),
                        trainable: true,
                        decay: true,
                    },
                    lin.weight.view().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.bias"),
                        trainable: true,
                        decay: false,
                    },
                    lin.bias.view().into_dyn(),
                );
            }
            Layer::BatchNorm2d(bn) => {
                f(
                    TensorSpec {
                        name: format!("{name}.gamma"),
                        trainable: true,
                        decay: false,
                    },
                    bn.gamma.view().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.beta"),
                        trainable: true,
                        decay: false,
                    },
                    bn.beta.view().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.running_mean"),
                        trainable: false,
                        decay: false,
                    },
                    bn.running_mean.view().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.running_var"),
                        trainable: false,
                        decay: false,
                    },
                    bn.running_var.view().into_dyn(),
                );
            }
            Layer::Residual { main, shortcut } => {
                visit_stack(main, &format!("{name}.main"), f);
                visit_stack(shortcut, &format!("{name}.short"), f);
            }
            _ => {}
        }
    }
}

fn visit_stack_mut(layers: &mut [Layer], prefix: &str, f: &mut VisitMutFn<'_>) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let name = layer_name(prefix, i);
        match layer {
            Layer::Conv2d(conv) => {
                f(
                    TensorSpec {
                        name: format!("{name}.weight"),
                        trainable: true,
                        decay: true,
                    },
                    conv.weight.view_mut().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.bias"),
                        trainable: true,
                        decay: false,
                    },
                    conv.bias.view_mut().into_dyn(),
                );
            }
            Layer::Linear(lin) => {
                f(
                    TensorSpec {
                        name: format!("{name}.weight"),
                        trainable: true,
                        decay: true,
                    },
                    lin.weight.view_mut().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.bias"),
                        trainable: true,
                        decay: false,
                    },
                    lin.bias.view_mut().into_dyn(),
                );
            }
            Layer::BatchNorm2d(bn) => {
                f(
                    TensorSpec {
                        name: format!("{name}.gamma"),
                        trainable: true,
                        decay: false,
                    },
                    bn.gamma.view_mut().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.beta"),
                        trainable: true,
                        decay: false,
                    },
                    bn.beta.view_mut().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.running_mean"),
                        trainable: false,
                        decay: false,
                    },
                    bn.running_mean.view_mut().into_dyn(),
                );
                f(
                    TensorSpec {
                        name: format!("{name}.running_var"),
                        trainable: false,
                        decay: false,
                    },
                    bn.running_var.view_mut().into_dyn(),
                );
            }
            Layer::Residual { main, shortcut } => {
                visit_stack_mut(main, &format!("{name}.main"), f);
                visit_stack_mut(shortcut, &format!("{name}.short"), f);
            }
            _ => {}
        }
    }
}

fn update_running_stack(layers: &mut [Layer], caches: &[Cache]) {
    for (layer, cache) in layers.iter_mut().zip(caches.iter()) {
        match (layer, cache) {
            (Layer::BatchNorm2d(bn), Cache::Bn(c)) => bn.update_running(c),
            (
                Layer::Residual { main, shortcut },
                Cache::Residual {
                    main: mc,
                    shortcut: sc,
                    ..
                },
            ) => {
                update_running_stack(main, mc);
                update_running_stack(shortcut, sc);
            }
            _ => {}
        }
    }
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
