//! Metrics: accuracy, AUROC, robust evaluation and ε-sweeps.
//!
//! The AUROC uses the Mann-Whitney rank statistic with average ranks on
//! ties, which equals the O(P·Q) pairwise count (ties ½) exactly — rank sums
//! are half-integers and stay exact in 64-bit floats at any realistic size.

#[cfg(test)]
mod tests;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attack::{
    adaptive_generative_attack, pgd_optimize, untargeted_ce_attack, AttackBudget, Direction,
    LogitModel, ScalarObjective,
};
use crate::classifier::GenerativeClassifier;
use crate::data::{ClassPartition, LabelledDataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Network};
use crate::rng::SeedState;
use crate::ImageBatch;

/// Detector scores for in-distribution (positive) and out-distribution
/// (negative) samples.
#[derive(Debug, Clone)]
pub struct ScorePair {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl ScorePair {
    pub fn new(pos: Vec<f64>, neg: Vec<f64>) -> Result<ScorePair> {
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::argument(format!(
                "score pair needs both sides non-empty ({} pos, {} neg)",
                pos.len(),
                neg.len()
            )));
        }
        for (name, side) in [("positive", &pos), ("negative", &neg)] {
            if let Some(i) = side.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite {name} score"), Some(i)));
            }
        }
        Ok(ScorePair { pos, neg })
    }
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auroc(scores: &ScorePair) -> f64 {
    let p = scores.pos.len();
    let q = scores.neg.len();
    // (score, is_positive), sorted by score.
    let mut all: Vec<(f64, bool)> = scores
        .pos
        .iter()
        .map(|&s| (s, true))
        .chain(scores.neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Average ranks within tie groups; sum positive ranks.
    let mut rank_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j average to (i+j+1)/2.
        let avg = (i + j + 1) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_pos += avg;
            }
        }
        i = j;
    }
    let u = rank_pos - (p * (p + 1)) as f64 / 2.0;
    u / (p as f64 * q as f64)
}

/// AUROC of a binary head separating clean in- from out-distribution images.
pub fn clean_auroc(head: &Network, in_x: &ImageBatch, out_x: &ImageBatch) -> Result<f64> {
    let pair = ScorePair::new(head.eval(in_x), head.eval(out_x))?;
    Ok(auroc(&pair))
}

/// Worst-case AUROC: in-distribution samples perturbed to minimize the head
/// score, out-distribution samples to maximize it, then AUROC on the
/// attacked scores. ε = 0 reduces to [`clean_auroc`] exactly.
pub fn adversarial_auroc_on(
    head: &Network,
    in_x: &ImageBatch,
    out_x: &ImageBatch,
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<f64> {
    let mut rin = rng.fork("auroc-in");
    let mut rout = rng.fork("auroc-out");
    let down = pgd_optimize(head, in_x, budget, Direction::Minimize, &mut rin)?;
    let up = pgd_optimize(head, out_x, budget, Direction::Maximize, &mut rout)?;
    let pair = ScorePair::new(down.objective, up.objective)?;
    Ok(auroc(&pair))
}

/// [`adversarial_auroc_on`] over a whole class partition.
pub fn adversarial_auroc(
    head: &Network,
    part: &ClassPartition,
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<f64> {
    adversarial_auroc_on(
        head,
        &part.in_dist.images,
        &part.out_dist.images,
        budget,
        rng,
    )
}

/// First `cap` rows of a batch (deterministic evaluation subset).
pub fn head_rows(x: &ImageBatch, cap: usize) -> ImageBatch {
    let n = x.shape()[0].min(cap);
    x.slice_axis(Axis(0), ndarray::Slice::from(0..n)).to_owned()
}

/// Either classifier family, for metrics that treat them uniformly.
#[derive(Clone, Copy)]
pub enum ClassifierModel<'a> {
    Softmax(&'a Network),
    Generative(&'a GenerativeClassifier),
}

/// Attack used for robust evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackId {
    /// Untargeted cross-entropy ascent on the model's logits.
    UntargetedCe,
    /// Per-head score maximization with calibrated selection; generative
    /// classifiers only.
    Adaptive,
}

impl ClassifierModel<'_> {
    fn logit_model(&self) -> &dyn LogitModel {
        match self {
            ClassifierModel::Softmax(net) => *net,
            ClassifierModel::Generative(gc) => *gc,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.logit_model().num_classes()
    }

    /// Checked per-sample argmax prediction.
    pub fn predict(&self, x: &ImageBatch) -> Result<Vec<usize>> {
        let z = self.logit_model().logits(x);
        if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "non-finite logit during evaluation",
                Some(bad / z.ncols()),
            ));
        }
        Ok(argmax_rows(&z))
    }

    /// Adversarial counterpart of a batch under the given attack.
    pub fn attacked(
        &self,
        x: &ImageBatch,
        labels: &[usize],
        attack: AttackId,
        budget: &AttackBudget,
        rng: &mut SeedState,
    ) -> Result<ImageBatch> {
        match (attack, self) {
            (AttackId::UntargetedCe, _) => {
                Ok(untargeted_ce_attack(self.logit_model(), x, labels, budget, rng)?.adversarial)
            }
            (AttackId::Adaptive, ClassifierModel::Generative(gc)) => {
                let heads: Vec<&dyn ScalarObjective> = gc
                    .heads()
                    .iter()
                    .map(|h| &h.net as &dyn ScalarObjective)
                    .collect();
                // Selection compares full decision scores, so the constants
                // passed to the attack fold in the priors.
                let shifts: Vec<f64> = gc
                    .calib
                    .iter()
                    .zip(&gc.log_priors)
                    .map(|(c, lp)| c + lp)
                    .collect();
                Ok(adaptive_generative_attack(&heads, &shifts, x, labels, budget, rng)?.adversarial)
            }
            (AttackId::Adaptive, ClassifierModel::Softmax(_)) => Err(Error::config(
                "the adaptive attack needs per-head access; softmax models only support \
                 the cross-entropy attack",
            )),
        }
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of samples the model labels correctly.
pub fn standard_accuracy(model: ClassifierModel<'_>, ds: &LabelledDataset) -> Result<f64> {
    Ok(accuracy(&model.predict(&ds.images)?, &ds.labels))
}

/// Per-class accuracy; `None` for classes without samples.
pub fn per_class_accuracy(
    model: ClassifierModel<'_>,
    ds: &LabelledDataset,
) -> Result<Vec<Option<f64>>> {
    let pred = model.predict(&ds.images)?;
    let k = ds.num_classes;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (p, &y) in pred.iter().zip(&ds.labels) {
        counts[y] += 1;
        if *p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect())
}

/// Accuracy on adversarially perturbed inputs. ε = 0 equals
/// [`standard_accuracy`] exactly.
pub fn robust_accuracy(
    model: ClassifierModel<'_>,
    ds: &LabelledDataset,
    attack: AttackId,
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<f64> {
    let adv = model.attacked(&ds.images, &ds.labels, attack, budget, rng)?;
    Ok(accuracy(&model.predict(&adv)?, &ds.labels))
}

/// One point of an ε-sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub accuracy: f64,
}

/// Robust accuracy per ε, each point attacked with an identically seeded
/// stream so the curve isolates the ε effect.
pub fn epsilon_sweep(
    model: ClassifierModel<'_>,
    ds: &LabelledDataset,
    attack: AttackId,
    template: &AttackBudget,
    eps_list: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if eps_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::argument("epsilon sweep list must be sorted ascending"));
    }
    let mut points = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut rng = SeedState::new(seed).fork("sweep");
        let acc = robust_accuracy(model, ds, attack, &template.with_epsilon(eps), &mut rng)?;
        points.push(SweepPoint {
            epsilon: eps,
            accuracy: acc,
        });
    }
    Ok(points)
}

/// One robust-accuracy measurement inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustPoint {
    pub attack: AttackId,
    pub epsilon: f64,
    pub accuracy: f64,
}

/// Full evaluation record for one model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model family tag ("generative" or "softmax").
    pub model: String,
    pub dataset_fingerprint: String,
    pub standard_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub robust: Vec<RobustPoint>,
    /// The attack schedule the ε values were run under.
    pub attack_template: AttackBudget,
    pub seed: u64,
    /// Wall-clock seconds; excluded from serialized output (and therefore
    /// from any hash of it) when unset so records stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

/// Run the standard metrics plus every requested attack × ε combination.
pub fn evaluate(
    model: ClassifierModel<'_>,
    model_name: &str,
    ds: &LabelledDataset,
    attacks: &[AttackId],
    template: &AttackBudget,
    eps_list: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    let started = std::time::Instant::now();
    let standard = standard_accuracy(model, ds)?;
    let per_class = per_class_accuracy(model, ds)?;
    let mut robust = Vec::new();
    for &attack in attacks {
        for point in epsilon_sweep(model, ds, attack, template, eps_list, seed)? {
            robust.push(RobustPoint {
                attack,
                epsilon: point.epsilon,
                accuracy: point.accuracy,
            });
        }
    }
    Ok(EvalReport {
        model: model_name.to_string(),
        dataset_fingerprint: ds.fingerprint(),
        standard_accuracy: standard,
        per_class_accuracy: per_class,
        robust,
        attack_template: template.clone(),
        seed,
        wall_clock_secs: Some(started.elapsed().as_secs_f64()),
    })
}
