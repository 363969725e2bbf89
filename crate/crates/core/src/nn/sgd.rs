//! SGD with momentum and selective weight decay.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{Gradients, Network};

/// Momentum SGD. Weight decay applies only to tensors flagged `decay`
/// (convolution and linear weights), not biases or normalization parameters.
#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// One update step: v <- momentum*v + (g + wd*p); p <- p - lr*v.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let velocity = &mut self.velocity;
        net.visit_tensors_mut(&mut |spec, mut view| {
            if !spec.trainable {
                return;
            }
            let g = grads
                .get(&spec.name)
                .unwrap_or_else(|| panic!("missing gradient for {}", spec.name));
            let v = velocity
                .entry(spec.name.clone())
                .or_insert_with(|| ArrayD::zeros(view.raw_dim()));
            if spec.decay && wd > 0.0 {
                ndarray::Zip::from(&mut *v).and(g).and(&view).for_each(|vv, &gv, &pv| {
                    *vv = momentum * *vv + gv + wd * pv;
                });
            } else {
                ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                    *vv = momentum * *vv + gv;
                });
            }
            view.zip_mut_with(v, |pv, &vv| *pv -= lr * vv);
        });
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Velocity buffers in name order, for checkpointing.
    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out: Vec<_> = self
            .velocity
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Restore velocity buffers saved by [`Sgd::state`].
    pub fn restore(&mut self, state: &[(String, ArrayD<f64>)]) {
        self.velocity = state.iter().cloned().collect();
    }
}
