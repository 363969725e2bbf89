//! Projected-gradient-descent machinery.
//!
//! Everything here is a pure function of (model snapshot, inputs, seed). The
//! generic optimizer [`pgd_optimize`] maximizes or minimizes any
//! [`ScalarObjective`] over the norm ball B(x, ε) ∩ [0,1]^d and returns the
//! best iterate per sample; the concrete attacks are thin wrappers choosing
//! the objective.


use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::rng::SeedState;
use crate::ImageBatch;

/// Perturbation norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    L2,
    Linf,
}

/// A perturbation budget plus the optimizer schedule used to spend it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackBudget {
    pub norm: NormKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub restarts: usize,
}

impl AttackBudget {
    /// Evaluation-strength schedule: 20 steps, step 2.5·ε/steps, random
    /// start, single restart.
    pub fn evaluation(norm: NormKind, epsilon: f64) -> AttackBudget {
        AttackBudget {
            norm,
            epsilon,
            steps: 20,
            step_size: default_step(epsilon, 20),
            random_start: true,
            restarts: 1,
        }
    }

    /// Training inner-loop schedule: 5 steps, no random start.
    pub fn training(norm: NormKind, epsilon: f64) -> AttackBudget {
        AttackBudget {
            norm,
            epsilon,
            steps: 5,
            step_size: default_step(epsilon, 5),
            random_start: false,
            restarts: 1,
        }
    }

    /// The same schedule at a different ε (step size rescaled).
    pub fn with_epsilon(&self, epsilon: f64) -> AttackBudget {
        AttackBudget {
            epsilon,
            step_size: default_step(epsilon, self.steps),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::argument(format!("epsilon {} must be ≥ 0", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::argument(format!(
                "step_size {} must be > 0",
                self.step_size
            )));
        }
        if self.restarts == 0 {
            return Err(Error::argument("restarts must be ≥ 1"));
        }
        Ok(())
    }
}

pub(crate) fn default_step(epsilon: f64, steps: usize) -> f64 {
    let s = 2.5 * epsilon / steps.max(1) as f64;
    // A zero budget still needs a formally positive step size.
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Outcome of an attack: the perturbed batch plus per-sample diagnostics.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: ImageBatch,
    /// Best objective value reached per sample.
    pub objective: Vec<f64>,
    /// Achieved perturbation norm per sample, in the budget's norm.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// A scalar function of an image batch, differentiable in the pixels.
pub trait ScalarObjective {
    /// Per-sample objective values.
    fn eval(&self, x: &ImageBatch) -> Vec<f64>;
    /// Per-sample values and pixel gradients.
    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch);
}

/// A multiclass model exposing per-class logits; the attacks only need the
/// logits and their pixel gradients.
pub trait LogitModel {
    fn num_classes(&self) -> usize;
    /// N×K logit matrix.
    fn logits(&self, x: &ImageBatch) -> Array2<f64>;
    /// Pixel gradient of Σ_{i,k} gout[i,k]·logit[i,k].
    fn logits_grad(&self, x: &ImageBatch, gout: &Array2<f64>) -> ImageBatch;
}

/// A multiclass network is directly a logit model.
impl LogitModel for Network {
    fn num_classes(&self) -> usize {
        self.out_dim
    }

    fn logits(&self, x: &ImageBatch) -> Array2<f64> {
        self.infer(x)
    }

    fn logits_grad(&self, x: &ImageBatch, gout: &Array2<f64>) -> ImageBatch {
        let (_, tape) = self.forward(x, Mode::Eval);
        self.backward(&tape, gout, false).0
    }
}

/// A scalar-output network is directly usable as an attack objective.
impl ScalarObjective for Network {
    fn eval(&self, x: &ImageBatch) -> Vec<f64> {
        assert_eq!(self.out_dim, 1, "scalar objective needs a 1-output network");
        self.infer(x).index_axis(Axis(1), 0).to_vec()
    }

    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch) {
        assert_eq!(self.out_dim, 1, "scalar objective needs a 1-output network");
        let (out, tape) = self.forward(x, Mode::Eval);
        let gout = Array2::ones((x.shape()[0], 1));
        let (gx, _) = self.backward(&tape, &gout, false);
        (out.index_axis(Axis(1), 0).to_vec(), gx)
    }
}

/// Project per-sample perturbations onto the ε-ball of the given norm.
pub fn project(delta: &ImageBatch, epsilon: f64, norm: NormKind) -> Result<ImageBatch> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::argument(format!("epsilon {epsilon} must be ≥ 0")));
    }
    let mut out = delta.clone();
    match norm {
        NormKind::Linf => out.mapv_inplace(|v| v.clamp(-epsilon, epsilon)),
        NormKind::L2 => {
            for mut row in out.axis_iter_mut(Axis(0)) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > epsilon {
                    let scale = epsilon / n;
                    row.mapv_inplace(|v| v * scale);
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample norms of a perturbation batch.
pub fn batch_norms(delta: &ImageBatch, norm: NormKind) -> Vec<f64> {
    delta
        .axis_iter(Axis(0))
        .map(|row| match norm {
            NormKind::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            NormKind::Linf => row.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        })
        .collect()
}

/// PGD over B(x, ε) ∩ [0,1]^d, returning the best iterate per sample across
/// all steps and restarts. With `random_start` off, the start point itself is
/// the first candidate, so the result is never worse than the input. A zero
/// budget (ε = 0 or steps = 0) returns `x` exactly.
pub fn pgd_optimize(
    objective: &dyn ScalarObjective,
    x: &ImageBatch,
    budget: &AttackBudget,
    direction: Direction,
    rng: &mut SeedState,
) -> Result<AttackResult> {
    budget.validate()?;
    let n = x.shape()[0];
    let start_vals = check_finite(objective.eval(x), "objective at start")?;
    if budget.epsilon == 0.0 || budget.steps == 0 {
        return Ok(AttackResult {
            adversarial: x.clone(),
            objective: start_vals,
            norms: vec![0.0; n],
        });
    }

    let sign = match direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let mut best = x.clone();
    let mut best_vals = start_vals;

    for restart in 0..budget.restarts {
        let mut cur = if budget.random_start {
            let mut r = rng.fork_indexed("restart", restart as u64);
            random_start(x, budget, &mut r)?
        } else {
            x.clone()
        };
        for _ in 0..budget.steps {
            let (vals, grad) = objective.eval_grad(&cur);
            let vals = check_finite(vals, "objective")?;
            update_best(&mut best, &mut best_vals, &cur, &vals, sign);

            let dir = step_direction(&grad, budget.norm)?;
            let mut delta = &cur + &(sign * budget.step_size * &dir) - x;
            delta = project(&delta, budget.epsilon, budget.norm)?;
            cur = (x + &delta).mapv(|v| v.clamp(0.0, 1.0));
        }
        let vals = check_finite(objective.eval(&cur), "objective")?;
        update_best(&mut best, &mut best_vals, &cur, &vals, sign);
    }

    let norms = batch_norms(&(&best - x), budget.norm);
    debug_assert!(norms.iter().all(|&v| v <= budget.epsilon + 1e-6));
    Ok(AttackResult {
        adversarial: best,
        objective: best_vals,
        norms,
    })
}

/// Normalized ascent direction. L2: per-sample unit gradient (zero gradient
/// rows stay zero, skipping the step); Linf: coordinate sign with sign(0)=0.
fn step_direction(grad: &ImageBatch, norm: NormKind) -> Result<ImageBatch> {
    if let Some((i, _)) = grad
        .axis_iter(Axis(0))
        .enumerate()
        .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numeric("non-finite pixel gradient", Some(i)));
    }
    let mut dir = grad.clone();
    match norm {
        NormKind::Linf => dir.mapv_inplace(|v| if v == 0.0 { 0.0 } else { v.signum() }),
        NormKind::L2 => {
            for mut row in dir.axis_iter_mut(Axis(0)) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.mapv_inplace(|v| v / n);
                }
            }
        }
    }
    Ok(dir)
}

fn random_start(x: &ImageBatch, budget: &AttackBudget, rng: &mut SeedState) -> Result<ImageBatch> {
    let mut delta = x.clone();
    let d = x.len() / x.shape()[0];
    match budget.norm {
        NormKind::Linf => {
            for v in delta.iter_mut() {
                *v = rng.uniform_in(-budget.epsilon, budget.epsilon);
            }
        }
        NormKind::L2 => {
            // Uniform in the ball: gaussian direction, radius ε·u^(1/d).
            for mut row in delta.axis_iter_mut(Axis(0)) {
                let mut norm2 = 0.0;
                for v in row.iter_mut() {
                    *v = rng.normal();
                    norm2 += *v * *v;
                }
                let n = norm2.sqrt().max(1e-12);
                let radius = budget.epsilon * rng.uniform().powf(1.0 / d as f64);
                row.mapv_inplace(|v| v / n * radius);
            }
        }
    }
    Ok((x + &delta).mapv(|v| v.clamp(0.0, 1.0)))
}

fn update_best(
    best: &mut ImageBatch,
    best_vals: &mut [f64],
    cand: &ImageBatch,
    vals: &[f64],
    sign: f64,
) {
    for (i, &v) in vals.iter().enumerate() {
        if sign * (v - best_vals[i]) > 0.0 {
            best_vals[i] = v;
            best.index_axis_mut(Axis(0), i)
                .assign(&cand.index_axis(Axis(0), i));
        }
    }
}

fn check_finite(vals: Vec<f64>, context: &str) -> Result<Vec<f64>> {
    match vals.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(format!("non-finite {context}"), Some(i))),
        None => Ok(vals),
    }
}

/// Cross-entropy of a logit model against fixed labels.
pub struct CeObjective<'a> {
    pub model: &'a dyn LogitModel,
    pub labels: &'a [usize],
}

impl ScalarObjective for CeObjective<'_> {
    fn eval(&self, x: &ImageBatch) -> Vec<f64> {
        let z = self.model.logits(x);
        ce_values(&z, self.labels)
    }

    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch) {
        let z = self.model.logits(x);
        let vals = ce_values(&z, self.labels);
        // dCE/dz = softmax(z) − onehot(y)
        let mut gout = softmax_rows(&z);
        for (i, &y) in self.labels.iter().enumerate() {
            gout[[i, y]] -= 1.0;
        }
        (vals, self.model.logits_grad(x, &gout))
    }
}

/// Row-stable softmax.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub(crate) fn ce_values(z: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    z.axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

/// Untargeted attack maximizing the cross-entropy of `model` at the true
/// labels.
pub fn untargeted_ce_attack(
    model: &dyn LogitModel,
    x: &ImageBatch,
    labels: &[usize],
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<AttackResult> {
    check_labels(labels, model.num_classes(), x.shape()[0])?;
    let obj = CeObjective { model, labels };
    pgd_optimize(&obj, x, budget, Direction::Maximize, rng)
}

/// Adaptive attack on a per-class score ensemble: each non-true head k is
/// maximized independently, then per sample the head with the largest
/// attacked score plus calibration constant wins (ties to the lowest index).
/// The calibration constants enter only this selection, mirroring the
/// classifier's decision rule.
pub fn adaptive_generative_attack(
    heads: &[&dyn ScalarObjective],
    calib: &[f64],
    x: &ImageBatch,
    labels: &[usize],
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<AttackResult> {
    let k = heads.len();
    if k < 2 {
        return Err(Error::argument(format!("need at least 2 heads, got {k}")));
    }
    if calib.len() != k {
        return Err(Error::argument(format!(
            "{} calibration constants for {k} heads",
            calib.len()
        )));
    }
    check_labels(labels, k, x.shape()[0])?;

    let mut per_head = Vec::with_capacity(k);
    for (ki, head) in heads.iter().enumerate() {
        let mut r = rng.fork_indexed("head", ki as u64);
        per_head.push(pgd_optimize(*head, x, budget, Direction::Maximize, &mut r)?);
    }

    let n = x.shape()[0];
    let mut adversarial = x.clone();
    let mut objective = vec![0.0; n];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let mut pick = None;
        let mut pick_val = f64::NEG_INFINITY;
        for ki in 0..k {
            if ki == labels[i] {
                continue;
            }
            let v = per_head[ki].objective[i] + calib[ki];
            if v > pick_val {
                pick_val = v;
                pick = Some(ki);
            }
        }
        let ki = pick.expect("K ≥ 2 leaves at least one candidate");
        adversarial
            .index_axis_mut(Axis(0), i)
            .assign(&per_head[ki].adversarial.index_axis(Axis(0), i));
        objective[i] = pick_val;
        norms[i] = per_head[ki].norms[i];
    }
    Ok(AttackResult {
        adversarial,
        objective,
        norms,
    })
}

/// One class logit of a multiclass model, as a scalar objective for targeted
/// attacks.
pub struct ClassLogit<'a> {
    pub model: &'a dyn LogitModel,
    pub class: usize,
}

impl ScalarObjective for ClassLogit<'_> {
    fn eval(&self, x: &ImageBatch) -> Vec<f64> {
        self.model.logits(x).index_axis(Axis(1), self.class).to_vec()
    }

    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch) {
        let z = self.model.logits(x);
        let vals = z.index_axis(Axis(1), self.class).to_vec();
        let mut gout = Array2::zeros(z.raw_dim());
        gout.index_axis_mut(Axis(1), self.class).fill(1.0);
        (vals, self.model.logits_grad(x, &gout))
    }
}

/// Targeted attack: maximize a class score (a binary head's output, or one
/// logit of a multiclass model wrapped in [`ClassLogit`]).
pub fn targeted_attack(
    score: &dyn ScalarObjective,
    x: &ImageBatch,
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<AttackResult> {
    pgd_optimize(score, x, budget, Direction::Maximize, rng)
}

fn check_labels(labels: &[usize], k: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::argument(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    match labels.iter().find(|&&y| y >= k) {
        Some(&y) => Err(Error::argument(format!("label {y} out of range for {k} classes"))),
        None => Ok(()),
    }
}
