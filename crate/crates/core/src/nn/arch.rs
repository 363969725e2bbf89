//! Architecture registry and weight initialization.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::rng::SeedState;

/// Supported network architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    /// Single linear map over flattened pixels; exact for toy tasks.
    LinearToy,
    /// Two conv blocks plus a small classifier head; the desk-scale workhorse.
    Smallcnn,
    /// Residual network, 8 basic blocks, width multiplier 1.0.
    Resnet18,
    /// Width multiplier 0.75.
    Resnet18thin,
    /// Width multiplier 0.5.
    Resnet18thinner,
}

impl ArchId {
    pub fn parse(id: &str) -> Result<ArchId> {
        match id {
            "linear-toy" => Ok(ArchId::LinearToy),
            "smallcnn" => Ok(ArchId::Smallcnn),
            "resnet18" => Ok(ArchId::Resnet18),
            "resnet18thin" => Ok(ArchId::Resnet18thin),
            "resnet18thinner" => Ok(ArchId::Resnet18thinner),
            other => Err(Error::config(format!("unknown architecture id '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::LinearToy => "linear-toy",
            ArchId::Smallcnn => "smallcnn",
            ArchId::Resnet18 => "resnet18",
            ArchId::Resnet18thin => "resnet18thin",
            ArchId::Resnet18thinner => "resnet18thinner",
        }
    }

    fn width_multiplier(&self) -> f64 {
        match self {
            ArchId::Resnet18thin => 0.75,
            ArchId::Resnet18thinner => 0.5,
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Build a network of the given architecture for inputs of shape
/// (channels, height, width) and `out_dim` output scores.
pub fn build_network(
    arch: ArchId,
    in_shape: (usize, usize, usize),
    out_dim: usize,
    rng: &mut SeedState,
) -> Network {
    let (c, h, w) = in_shape;
    let layers = match arch {
        ArchId::LinearToy => vec![
            Layer::Flatten,
            linear(c * h * w, out_dim, rng, true),
        ],
        ArchId::Smallcnn => {
            let fc_in = 16 * (h / 4) * (w / 4);
            vec![
                conv(c, 8, 3, 1, 1, rng),
                Layer::ReLU,
                Layer::MaxPool2,
                conv(8, 16, 3, 1, 1, rng),
                Layer::ReLU,
                Layer::MaxPool2,
                Layer::Flatten,
                linear(fc_in, 32, rng, false),
                Layer::ReLU,
                linear(32, out_dim, rng, true),
            ]
        }
        ArchId::Resnet18 | ArchId::Resnet18thin | ArchId::Resnet18thinner => {
            resnet18(c, out_dim, arch.width_multiplier(), rng)
        }
    };
    Network {
        layers,
        in_shape,
        out_dim,
        arch,
    }
}

fn he_normal(rng: &mut SeedState, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Array2<f64> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.normal() * std)
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut SeedState) -> Layer {
    let fan_in = cin * k * k;
    Layer::Conv2d(Conv2d {
        weight: he_normal(rng, cout, fan_in, fan_in, 1.0),
        bias: Array1::zeros(cout),
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding: pad,
    })
}

fn linear(din: usize, dout: usize, rng: &mut SeedState, output_layer: bool) -> Layer {
    // Output layers start small so initial scores sit near zero.
    let gain = if output_layer { 0.5 } else { 1.0 };
    Layer::Linear(Linear {
        weight: he_normal(rng, dout, din, din, gain),
        bias: Array1::zeros(dout),
    })
}

fn basic_block(cin: usize, cout: usize, stride: usize, rng: &mut SeedState) -> Layer {
    let main = vec![
        conv(cin, cout, 3, stride, 1, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(cout)),
        Layer::ReLU,
        conv(cout, cout, 3, 1, 1, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(cout)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            conv(cin, cout, 1, stride, 0, rng),
            Layer::BatchNorm2d(BatchNorm2d::new(cout)),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual { main, shortcut }
}

/// CIFAR-style ResNet-18: 3x3 stem, four stages of two basic blocks,
/// global average pooling, linear head. `width` scales channel counts.
fn resnet18(cin: usize, out_dim: usize, width: f64, rng: &mut SeedState) -> Vec<Layer> {
    let ch = |base: usize| ((base as f64 * width).round() as usize).max(1);
    let (c1, c2, c3, c4) = (ch(64), ch(128), ch(256), ch(512));
    let mut layers = vec![
        conv(cin, c1, 3, 1, 1, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(c1)),
        Layer::ReLU,
    ];
    for (cinn, coutn, stride) in [
        (c1, c1, 1),
        (c1, c1, 1),
        (c1, c2, 2),
        (c2, c2, 1),
        (c2, c3, 2),
        (c3, c3, 1),
        (c3, c4, 2),
        (c4, c4, 1),
    ] {
        layers.push(basic_block(cinn, coutn, stride, rng));
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(linear(c4, out_dim, rng, true));
    layers
}
