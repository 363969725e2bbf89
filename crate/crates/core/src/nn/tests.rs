use ndarray::{Array2, Array4};

use super::arch::build_network;
use super::*;
use crate::rng::SeedState;
use crate::testkit::{rand_images, rel_err};

/// Scalar loss used to exercise the full backward pass: sum of squared
/// outputs, so d(loss)/d(out) = 2*out.
fn sq_loss(net: &Network, x: &ImageBatch, mode: Mode) -> f64 {
    let (out, _) = net.forward(x, mode);
    out.iter().map(|v| v * v).sum()
}

// `eps` must stay below the distance to the nearest ReLU kink: with batch-stat
// normalization the pre-activations are centred near zero, and a perturbation
// that pushes one across zero corrupts the central difference by O(1).
fn check_param_grads(net: &mut Network, x: &ImageBatch, mode: Mode, eps: f64, tol: f64) {
    let (out, tape) = net.forward(x, mode);
    let gout = out.mapv(|v| 2.0 * v);
    let (_, grads) = net.backward(&tape, &gout, true);
    let grads = grads.unwrap();

    // Finite differences on a deterministic subsample of each tensor.
    let specs: Vec<(String, usize)> = {
        let mut v = Vec::new();
        net.visit_tensors(&mut |spec, view| {
            if spec.trainable {
                v.push((spec.name, view.len()));
            }
        });
        v
    };
    for (name, len) in specs {
        let stride = (len / 7).max(1);
        for flat_idx in (0..len).step_by(stride) {
            let mut loss_p = 0.0;
            let mut loss_m = 0.0;
            for (sign, loss) in [(1.0, &mut loss_p), (-1.0, &mut loss_m)] {
                perturb(net, &name, flat_idx, sign * eps);
                *loss = sq_loss(net, x, mode);
                perturb(net, &name, flat_idx, -sign * eps);
            }
            let fd = (loss_p - loss_m) / (2.0 * eps);
            let analytic = grads.get(&name).unwrap().as_slice().unwrap()[flat_idx];
            // A conv bias feeding straight into batch-stat normalization has an
            // exactly zero gradient; there the difference quotient is pure
            // roundoff noise, so only check coordinates above the noise floor.
            if analytic.abs() < 1e-6 && fd.abs() < 1e-6 {
                continue;
            }
            assert!(
                rel_err(analytic, fd) < tol,
                "param grad mismatch {name}[{flat_idx}]: analytic {analytic}, fd {fd}"
            );
        }
    }
}

fn perturb(net: &mut Network, name: &str, flat_idx: usize, delta: f64) {
    net.visit_tensors_mut(&mut |spec, mut view| {
        if spec.name == name {
            view.as_slice_mut().unwrap()[flat_idx] += delta;
        }
    });
}

fn check_input_grads(net: &Network, x: &ImageBatch, mode: Mode, tol: f64) {
    let (out, tape) = net.forward(x, mode);
    let gout = out.mapv(|v| 2.0 * v);
    let (gin, _) = net.backward(&tape, &gout, false);
    let eps = 1e-6;
    let len = x.len();
    let stride = (len / 13).max(1);
    for flat_idx in (0..len).step_by(stride) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[flat_idx] += eps;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[flat_idx] -= eps;
        let fd = (sq_loss(net, &xp, mode) - sq_loss(net, &xm, mode)) / (2.0 * eps);
        let analytic = gin.as_slice().unwrap()[flat_idx];
        assert!(
            rel_err(analytic, fd) < tol,
            "input grad mismatch [{flat_idx}]: analytic {analytic}, fd {fd}"
        );
    }
}

#[test]
fn linear_toy_gradients() {
    let mut rng = SeedState::new(11);
    let mut net = build_network(ArchId::LinearToy, (1, 2, 3), 2, &mut rng);
    let x = rand_images(4, (1, 2, 3), &mut rng);
    check_param_grads(&mut net, &x, Mode::Eval, 1e-5, 1e-6);
    check_input_grads(&net, &x, Mode::Eval, 1e-6);
}

#[test]
fn smallcnn_gradients() {
    let mut rng = SeedState::new(12);
    let mut net = build_network(ArchId::Smallcnn, (1, 8, 8), 1, &mut rng);
    let x = rand_images(3, (1, 8, 8), &mut rng);
    check_param_grads(&mut net, &x, Mode::Eval, 1e-5, 1e-4);
    check_input_grads(&net, &x, Mode::Eval, 1e-4);
}

#[test]
fn resnet_gradients_eval_mode() {
    let mut rng = SeedState::new(13);
    let mut net = build_network(ArchId::Resnet18thinner, (1, 8, 8), 2, &mut rng);
    // Give the running stats non-trivial values so eval-mode normalization
    // is exercised away from the identity.
    net.visit_tensors_mut(&mut |spec, mut view| {
        if spec.name.ends_with("running_mean") {
            view.mapv_inplace(|_| 0.05);
        }
        if spec.name.ends_with("running_var") {
            view.mapv_inplace(|_| 0.8);
        }
    });
    let x = rand_images(2, (1, 8, 8), &mut rng);
    check_input_grads(&net, &x, Mode::Eval, 1e-4);
}

#[test]
fn resnet_gradients_batch_stats() {
    let mut rng = SeedState::new(14);
    let mut net = build_network(ArchId::Resnet18thinner, (1, 8, 8), 1, &mut rng);
    let x = rand_images(3, (1, 8, 8), &mut rng);
    check_param_grads(&mut net, &x, Mode::Train, 1e-6, 1e-5);
    check_input_grads(&net, &x, Mode::Train, 2e-4);
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = SeedState::new(15);
    let conv = match super::arch::build_network(ArchId::Smallcnn, (2, 6, 6), 1, &mut rng).layers
        [0]
    .clone()
    {
        Layer::Conv2d(c) => c,
        _ => unreachable!(),
    };
    let x = rand_images(2, (2, 6, 6), &mut rng);
    let (y, _) = conv.forward(&x);
    // Direct quadruple-loop convolution as the oracle.
    let (n, _, h, w) = x.dim();
    let k = conv.kernel;
    let pad = conv.padding as isize;
    for ni in 0..n {
        for co in 0..conv.out_channels {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = conv.bias[co];
                    for ci in 0..conv.in_channels {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = oh as isize + kh as isize - pad;
                                let iw = ow as isize + kw as isize - pad;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[(co, (ci * k + kh) * k + kw)]
                                    * x[(ni, ci, ih as usize, iw as usize)];
                            }
                        }
                    }
                    let got = y[(ni, co, oh, ow)];
                    assert!(
                        (got - acc).abs() < 1e-10,
                        "conv mismatch at ({ni},{co},{oh},{ow}): {got} vs {acc}"
                    );
                }
            }
        }
    }
}

#[test]
fn maxpool_forward_and_backward() {
    let x = Array4::from_shape_vec(
        (1, 1, 2, 4),
        vec![1.0, 2.0, 5.0, 3.0, 4.0, 0.0, 5.0, 5.0],
    )
    .unwrap();
    let (y, argmax) = layers::maxpool2_forward(&x);
    assert_eq!(y[(0, 0, 0, 0)], 4.0);
    assert_eq!(y[(0, 0, 0, 1)], 5.0);
    // Tie picks the first cell in scan order.
    assert_eq!(argmax[1], 2);
    let gout = Array4::from_elem((1, 1, 1, 2), 1.0);
    let dx = layers::maxpool2_backward(&gout, &argmax, (1, 1, 2, 4));
    assert_eq!(dx[(0, 0, 1, 0)], 1.0);
    assert_eq!(dx[(0, 0, 0, 2)], 1.0);
    assert_eq!(dx.sum(), 2.0);
}

#[test]
fn snapshot_restore_roundtrip() {
    let mut rng = SeedState::new(16);
    let net = build_network(ArchId::Smallcnn, (1, 8, 8), 1, &mut rng);
    let snap = net.snapshot();
    let mut other = build_network(ArchId::Smallcnn, (1, 8, 8), 1, &mut SeedState::new(99));
    other.restore(&snap);
    let x = rand_images(2, (1, 8, 8), &mut rng);
    assert_eq!(net.infer(&x), other.infer(&x));
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeedState::new(17);
    let net = build_network(ArchId::Smallcnn, (1, 8, 8), 1, &mut rng);
    let meta = io::CheckpointMeta {
        arch: ArchId::Smallcnn,
        class_index: Some(2),
        in_shape: (1, 8, 8),
        out_dim: 1,
        epoch: 5,
        config_hash: "deadbeef".into(),
        train_loss: 0.5,
        clean_metric: 0.9,
        adv_metric: 0.8,
    };
    let stem = io::head_stem(dir.path(), 2, 5);
    io::save_checkpoint(&stem, &net.snapshot(), &meta).unwrap();
    let (loaded, meta2) = io::load_network(&stem).unwrap();
    assert_eq!(meta2.epoch, 5);
    assert_eq!(meta2.class_index, Some(2));
    let x = rand_images(2, (1, 8, 8), &mut rng);
    assert_eq!(net.infer(&x), loaded.infer(&x));
}

#[test]
fn argmax_ties_break_low() {
    let s = Array2::from_shape_vec((2, 3), vec![1.0, 1.0, 0.0, 0.5, 0.7, 0.7]).unwrap();
    assert_eq!(argmax_rows(&s), vec![0, 1]);
}

#[test]
fn bn_running_stats_update() {
    let mut bn = layers::BatchNorm2d::new(1);
    let x = Array4::from_shape_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (_, cache) = bn.forward(&x, Mode::Train);
    bn.update_running(&cache);
    // mean 2.5, biased var 1.25, unbiased 5/3; momentum 0.1 from (0, 1).
    assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

// Batch-stat backward in isolation: no ReLU in the path, so finite
// differences are clean and the tolerance can be tight.
#[test]
fn bn_batch_stats_gradients() {
    let mut rng = SeedState::new(5);
    let mut bn = layers::BatchNorm2d::new(2);
    bn.gamma[0] = 1.3;
    bn.gamma[1] = 0.7;
    bn.beta[0] = 0.1;
    bn.beta[1] = -0.2;
    let x = rand_images(3, (2, 4, 4), &mut rng);
    let loss = |xx: &ImageBatch, b: &layers::BatchNorm2d| -> f64 {
        let (y, _) = b.forward(xx, Mode::Train);
        y.iter().map(|v| v * v).sum()
    };
    let (y, cache) = bn.forward(&x, Mode::Train);
    let gout = y.mapv(|v| 2.0 * v);
    let (dx, params) = bn.backward(&gout, &cache, true);
    let (dgamma, dbeta) = params.unwrap();

    // The map is smooth (no kinks), so a larger step keeps the difference
    // quotient above roundoff without truncation error mattering.
    let eps = 1e-5;
    for idx in (0..x.len()).step_by(11) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[idx] -= eps;
        let fd = (loss(&xp, &bn) - loss(&xm, &bn)) / (2.0 * eps);
        let an = dx.as_slice().unwrap()[idx];
        assert!(rel_err(an, fd) < 1e-5, "bn dx[{idx}]: analytic {an}, fd {fd}");
    }
    for ci in 0..2 {
        for (grad, field) in [(&dgamma, 0usize), (&dbeta, 1)] {
            let mut bp = bn.clone();
            let mut bm = bn.clone();
            if field == 0 {
                bp.gamma[ci] += eps;
                bm.gamma[ci] -= eps;
            } else {
                bp.beta[ci] += eps;
                bm.beta[ci] -= eps;
            }
            let fd = (loss(&x, &bp) - loss(&x, &bm)) / (2.0 * eps);
            assert!(
                rel_err(grad[ci], fd) < 1e-5,
                "bn param grad ch {ci}: analytic {}, fd {fd}",
                grad[ci]
            );
        }
    }
}
