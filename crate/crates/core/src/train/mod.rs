//! Adversarial training of binary density heads and the softmax baseline.
//!
//! A head d_k is a single-output network read as an unnormalized
//! class-conditional log-density; D_k = σ(d_k) is its probabilistic form.
//! The out-distribution objective trains D_k to accept class-k images and
//! reject worst-case perturbations of other-class images; the combined
//! objective additionally perturbs the in-distribution side. The inner
//! adversary's output is treated as a fixed input when differentiating for
//! the parameter update (first-order adversarial training).


use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    default_step, pgd_optimize, softmax_rows, untargeted_ce_attack, AttackBudget, Direction,
    NormKind, ScalarObjective,
};
use crate::data::{augment, sample_training_pair, AugmentPolicy, ClassPartition, LabelledDataset};
use crate::error::{Error, Result};
use crate::eval::{adversarial_auroc_on, clean_auroc, head_rows};
use crate::nn::arch::{build_network, ArchId};
use crate::nn::io::{load_tensors, save_tensors};
use crate::nn::sgd::Sgd;
use crate::nn::{argmax_rows, Gradients, Mode, Network, Tape};
use crate::rng::SeedState;
use crate::ImageBatch;

/// Loss floor: probabilities are clamped to ≥ 1e-12 inside the logs, with a
/// zero gradient in the clamped region.
const LOG_FLOOR: f64 = 1e-12;

/// A trained (or in-training) per-class density head.
#[derive(Debug, Clone)]
pub struct BinaryHead {
    pub net: Network,
    pub class: usize,
}

/// Numerically stable σ(d).
pub fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// log σ(d(x)) — the in-distribution probability objective. Stable form
/// −softplus(−d); the attack minimizes this to find hard in-distribution
/// perturbations.
pub struct LogD<'a>(pub &'a Network);

/// log(1 − σ(d(x))) = log σ(−d(x)) — the out-distribution term. The attack
/// minimizes this to make other-class images look in-distribution.
pub struct LogOneMinusD<'a>(pub &'a Network);

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ScalarObjective for LogD<'_> {
    fn eval(&self, x: &ImageBatch) -> Vec<f64> {
        ScalarObjective::eval(self.0, x)
            .into_iter()
            .map(|d| -softplus(-d))
            .collect()
    }

    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch) {
        let (out, tape) = self.0.forward(x, Mode::Eval);
        let d = out.index_axis(Axis(1), 0);
        // d/dd log σ(d) = σ(−d)
        let gout = Array2::from_shape_fn((x.shape()[0], 1), |(i, _)| sigmoid(-d[i]));
        let (gx, _) = self.0.backward(&tape, &gout, false);
        (d.iter().map(|&v| -softplus(-v)).collect(), gx)
    }
}

impl ScalarObjective for LogOneMinusD<'_> {
    fn eval(&self, x: &ImageBatch) -> Vec<f64> {
        ScalarObjective::eval(self.0, x)
            .into_iter()
            .map(|d| -softplus(d))
            .collect()
    }

    fn eval_grad(&self, x: &ImageBatch) -> (Vec<f64>, ImageBatch) {
        let (out, tape) = self.0.forward(x, Mode::Eval);
        let d = out.index_axis(Axis(1), 0);
        // d/dd log(1−σ(d)) = −σ(d)
        let gout = Array2::from_shape_fn((x.shape()[0], 1), |(i, _)| -sigmoid(d[i]));
        let (gx, _) = self.0.backward(&tape, &gout, false);
        (d.iter().map(|&v| -softplus(v)).collect(), gx)
    }
}

/// Inner-adversary schedule; the ε is supplied per call so one schedule
/// serves both the in- and out-distribution attacks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerBudget {
    pub norm: NormKind,
    pub steps: usize,
    pub random_start: bool,
}

impl Default for InnerBudget {
    fn default() -> Self {
        InnerBudget {
            norm: NormKind::L2,
            steps: 5,
            random_start: false,
        }
    }
}

impl InnerBudget {
    pub fn with_eps(&self, eps: f64) -> AttackBudget {
        AttackBudget {
            norm: self.norm,
            epsilon: eps,
            steps: self.steps,
            step_size: default_step(eps, self.steps),
            random_start: self.random_start,
            restarts: 1,
        }
    }
}

/// Floored binary cross-entropy over a paired batch:
/// −mean log D(in) − mean log(1−D(out)), evaluated with running statistics.
pub fn bce_pair_loss(head: &Network, in_batch: &ImageBatch, out_batch: &ImageBatch) -> f64 {
    let d_in = ScalarObjective::eval(head, in_batch);
    let d_out = ScalarObjective::eval(head, out_batch);
    bce_terms(&d_in, &d_out)
}

fn bce_terms(d_in: &[f64], d_out: &[f64]) -> f64 {
    // A non-finite score means the head has diverged. Report it as a NaN
    // loss rather than letting `max` silently swallow the NaN into the floor.
    if d_in.iter().chain(d_out).any(|d| !d.is_finite()) {
        return f64::NAN;
    }
    let li: f64 = d_in
        .iter()
        .map(|&d| -sigmoid(d).max(LOG_FLOOR).ln())
        .sum::<f64>()
        / d_in.len() as f64;
    let lo: f64 = d_out
        .iter()
        .map(|&d| -sigmoid(-d).max(LOG_FLOOR).ln())
        .sum::<f64>()
        / d_out.len() as f64;
    li + lo
}

/// Loss plus parameter gradients of the paired BCE at fixed inputs. Returns
/// the forward tapes so the caller can fold the batch statistics into the
/// running estimates after the optimizer step.
pub fn bce_pair_grads(
    head: &Network,
    in_batch: &ImageBatch,
    out_batch: &ImageBatch,
    mode: Mode,
) -> (f64, Gradients, Tape, Tape) {
    let n_in = in_batch.shape()[0] as f64;
    let n_out = out_batch.shape()[0] as f64;
    let (out_i, tape_i) = head.forward(in_batch, mode);
    let (out_o, tape_o) = head.forward(out_batch, mode);
    let d_in = out_i.index_axis(Axis(1), 0);
    let d_out = out_o.index_axis(Axis(1), 0);
    let loss = bce_terms(&d_in.to_vec(), &d_out.to_vec());

    // d/dd of the floored −log σ(d) is σ(d)−1, zero once σ hits the floor.
    let gout_i = Array2::from_shape_fn((in_batch.shape()[0], 1), |(i, _)| {
        let p = sigmoid(d_in[i]);
        if p > LOG_FLOOR {
            (p - 1.0) / n_in
        } else {
            0.0
        }
    });
    let gout_o = Array2::from_shape_fn((out_batch.shape()[0], 1), |(i, _)| {
        let d = d_out[i];
        if sigmoid(-d) > LOG_FLOOR {
            sigmoid(d) / n_out
        } else {
            0.0
        }
    });
    let (_, gi) = head.backward(&tape_i, &gout_i, true);
    let (_, go) = head.backward(&tape_o, &gout_o, true);
    let mut grads = gi.expect("want_params");
    grads.accumulate(go.expect("want_params"));
    (loss, grads, tape_i, tape_o)
}

/// Run the inner adversaries: the in-distribution batch is perturbed to
/// minimize log D, the out-distribution batch to minimize log(1−D). An ε of
/// zero leaves the corresponding side untouched (bit-exact) and consumes no
/// randomness for it.
pub fn adversarial_batches(
    head: &Network,
    in_batch: &ImageBatch,
    out_batch: &ImageBatch,
    eps_in: f64,
    eps_out: f64,
    inner: &InnerBudget,
    rng: &mut SeedState,
) -> Result<(ImageBatch, ImageBatch)> {
    let in_adv = if eps_in > 0.0 {
        let mut r = rng.fork("inner-in");
        pgd_optimize(
            &LogD(head),
            in_batch,
            &inner.with_eps(eps_in),
            Direction::Minimize,
            &mut r,
        )?
        .adversarial
    } else {
        in_batch.clone()
    };
    let out_adv = if eps_out > 0.0 {
        let mut r = rng.fork("inner-out");
        pgd_optimize(
            &LogOneMinusD(head),
            out_batch,
            &inner.with_eps(eps_out),
            Direction::Minimize,
            &mut r,
        )?
        .adversarial
    } else {
        out_batch.clone()
    };
    Ok((in_adv, out_adv))
}

/// Out-distribution adversarial-training loss: −mean log D(in) −
/// mean log(1−D(out′)) with out′ the inner adversary's output. ε = 0 is
/// exactly the plain paired BCE.
pub fn out_dist_at_loss(
    head: &Network,
    in_batch: &ImageBatch,
    out_batch: &ImageBatch,
    eps: f64,
    inner: &InnerBudget,
    rng: &mut SeedState,
) -> Result<f64> {
    combined_at_loss(head, in_batch, out_batch, 0.0, eps, inner, rng)
}

/// Combined in/out adversarial-training loss; ε_in = 0 reduces exactly to
/// [`out_dist_at_loss`].
pub fn combined_at_loss(
    head: &Network,
    in_batch: &ImageBatch,
    out_batch: &ImageBatch,
    eps_in: f64,
    eps_out: f64,
    inner: &InnerBudget,
    rng: &mut SeedState,
) -> Result<f64> {
    if eps_in < 0.0 || eps_out < 0.0 {
        return Err(Error::argument("perturbation sizes must be ≥ 0"));
    }
    let (in_adv, out_adv) =
        adversarial_batches(head, in_batch, out_batch, eps_in, eps_out, inner, rng)?;
    Ok(bce_pair_loss(head, &in_adv, &out_adv))
}

/// Per-class learning-rate override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLr {
    pub class: usize,
    pub lr: f64,
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchId,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Heads whose class needs a different initial rate.
    pub lr_class_overrides: Vec<ClassLr>,
    /// Epoch after which the rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub norm: NormKind,
    /// ε for the out-distribution inner adversary; doubles as the training ε
    /// of the softmax baseline.
    pub eps_out: f64,
    /// ε for the in-distribution inner adversary; 0 disables it.
    pub eps_in: f64,
    pub inner_steps: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Epochs between trail records.
    pub eval_interval: usize,
    /// Paired batches per epoch; 0 derives ⌈n/batch⌉ from the data.
    pub steps_per_epoch: usize,
    /// Cap on the evaluation subset used for trail metrics.
    pub eval_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchId::Smallcnn,
            epochs: 20,
            batch: 64,
            lr: 0.05,
            lr_class_overrides: Vec::new(),
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            norm: NormKind::L2,
            eps_out: 0.3,
            eps_in: 0.0,
            inner_steps: 5,
            augment: AugmentPolicy::None,
            seed: 0,
            eval_interval: 1,
            steps_per_epoch: 0,
            eval_cap: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.lr)));
        }
        for o in &self.lr_class_overrides {
            if !(o.lr > 0.0 && o.lr.is_finite()) {
                return Err(Error::config(format!(
                    "learning rate {} for class {} must be > 0",
                    o.lr, o.class
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be ≥ 0"));
        }
        for (name, eps) in [("eps_out", self.eps_out), ("eps_in", self.eps_in)] {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(Error::config(format!("{name} {eps} must be ≥ 0")));
            }
        }
        if let Some(drop) = self.lr_drop_epoch {
            if drop > self.epochs {
                return Err(Error::config(format!(
                    "lr_drop_epoch {drop} after the last epoch {}",
                    self.epochs
                )));
            }
        }
        if self.lr_drop_factor <= 0.0 || self.lr_drop_factor.is_nan() {
            return Err(Error::config("lr_drop_factor must be > 0"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be ≥ 1"));
        }
        if self.eval_cap == 0 {
            return Err(Error::config("eval_cap must be ≥ 1"));
        }
        Ok(())
    }

    /// Learning rate for a given head and epoch (1-based epochs).
    pub fn lr_at(&self, class: Option<usize>, epoch: usize) -> f64 {
        let base = class
            .and_then(|k| {
                self.lr_class_overrides
                    .iter()
                    .find(|o| o.class == k)
                    .map(|o| o.lr)
            })
            .unwrap_or(self.lr);
        match self.lr_drop_epoch {
            Some(drop) if epoch > drop => base * self.lr_drop_factor,
            _ => base,
        }
    }

    /// Content fingerprint (SHA-256 of the serialized config). Resumable
    /// training stamps it into the state file and refuses to continue a
    /// state written under a different recipe.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    fn inner(&self) -> InnerBudget {
        InnerBudget {
            norm: self.norm,
            steps: self.inner_steps,
            random_start: false,
        }
    }
}

/// One recorded point of a training run. `clean_metric`/`adv_metric` are
/// AUROCs for binary heads and accuracies for the softmax baseline.
#[derive(Debug, Clone)]
pub struct TrailEntry {
    pub epoch: usize,
    /// Kept when the entry improved a running-best metric (and always for
    /// the initial and final epochs); dropped otherwise to bound memory.
    pub snapshot: Option<Vec<(String, ArrayD<f64>)>>,
    pub train_loss: f64,
    pub clean_metric: f64,
    pub adv_metric: f64,
}

/// Append-only record of a training run.
#[derive(Debug, Clone)]
pub struct CheckpointTrail {
    /// Head class, or None for the softmax baseline.
    pub class: Option<usize>,
    pub entries: Vec<TrailEntry>,
    /// Set when training aborted on a non-finite loss at (epoch, step).
    pub diverged: Option<(usize, usize)>,
}

impl CheckpointTrail {
    /// True once no further training can happen under a config with this
    /// epoch count: the final epoch was recorded, or the run diverged.
    pub fn complete(&self, epochs: usize) -> bool {
        self.diverged.is_some() || self.entries.last().is_some_and(|e| e.epoch >= epochs)
    }
}

/// Early-stopping criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMetric {
    Clean,
    Adv,
}

impl TrailEntry {
    pub fn metric(&self, m: SelectMetric) -> f64 {
        match m {
            SelectMetric::Clean => self.clean_metric,
            SelectMetric::Adv => self.adv_metric,
        }
    }
}

/// The snapshot-bearing entry with the best metric; ties break toward the
/// earlier epoch.
pub fn early_stop_select(trail: &CheckpointTrail, metric: SelectMetric) -> Result<&TrailEntry> {
    let mut best: Option<&TrailEntry> = None;
    for e in trail.entries.iter().filter(|e| e.snapshot.is_some()) {
        if best.is_none_or(|b| e.metric(metric) > b.metric(metric)) {
            best = Some(e);
        }
    }
    best.ok_or_else(|| Error::argument("empty checkpoint trail"))
}

struct TrailBuilder {
    trail: CheckpointTrail,
    best_clean: f64,
    best_adv: f64,
}

impl TrailBuilder {
    fn new(class: Option<usize>) -> TrailBuilder {
        TrailBuilder {
            trail: CheckpointTrail {
                class,
                entries: Vec::new(),
                diverged: None,
            },
            best_clean: f64::NEG_INFINITY,
            best_adv: f64::NEG_INFINITY,
        }
    }

    /// Rebuild the running bests from a previously recorded trail.
    fn from_trail(trail: CheckpointTrail) -> TrailBuilder {
        let best = |pick: fn(&TrailEntry) -> f64| {
            trail.entries.iter().map(pick).fold(f64::NEG_INFINITY, f64::max)
        };
        TrailBuilder {
            best_clean: best(|e| e.clean_metric),
            best_adv: best(|e| e.adv_metric),
            trail,
        }
    }

    fn record(
        &mut self,
        net: &Network,
        epoch: usize,
        train_loss: f64,
        clean: f64,
        adv: f64,
        force_keep: bool,
    ) {
        let keep = force_keep || clean > self.best_clean || adv > self.best_adv;
        self.best_clean = self.best_clean.max(clean);
        self.best_adv = self.best_adv.max(adv);
        self.trail.entries.push(TrailEntry {
            epoch,
            snapshot: keep.then(|| net.snapshot()),
            train_loss,
            clean_metric: clean,
            adv_metric: adv,
        });
    }
}

/// The mutable trio a training loop advances; assembled fresh or from a
/// persisted state file.
struct RunState {
    net: Network,
    sgd: Sgd,
    builder: TrailBuilder,
}

impl RunState {
    fn fresh(net: Network, cfg: &TrainConfig, class: Option<usize>) -> RunState {
        RunState {
            net,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            builder: TrailBuilder::new(class),
        }
    }
}

fn run_name(class: Option<usize>) -> String {
    match class {
        Some(k) => format!("head {k}"),
        None => "the softmax baseline".to_string(),
    }
}

/// Sidecar for a resumable-training state file: everything but the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainStateMeta {
    config_hash: String,
    arch: ArchId,
    in_shape: (usize, usize, usize),
    out_dim: usize,
    class: Option<usize>,
    /// Last epoch the persisted network and optimizer have completed.
    epoch: usize,
    diverged: Option<(usize, usize)>,
    entries: Vec<TrailEntryMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrailEntryMeta {
    epoch: usize,
    train_loss: f64,
    clean_metric: f64,
    adv_metric: f64,
    snapshot: bool,
}

/// Where a run persists its state, and the config hash stamped into it.
struct PersistTo<'a> {
    stem: &'a Path,
    config_hash: String,
}

fn maybe_persist(
    persist: Option<&PersistTo<'_>>,
    net: &Network,
    sgd: &Sgd,
    trail: &CheckpointTrail,
) -> Result<()> {
    match persist {
        Some(p) => write_state(p.stem, &p.config_hash, net, sgd, trail),
        None => Ok(()),
    }
}

/// Persist the full training state — network, optimizer velocity, and trail
/// (snapshots included) — as one tensor file plus a JSON sidecar. Both are
/// written to a scratch stem and renamed into place so an interrupted write
/// cannot corrupt an existing good state.
fn write_state(
    stem: &Path,
    config_hash: &str,
    net: &Network,
    sgd: &Sgd,
    trail: &CheckpointTrail,
) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, t) in net.snapshot() {
        tensors.push((format!("net/{name}"), t));
    }
    for (name, t) in sgd.state() {
        tensors.push((format!("opt/{name}"), t));
    }
    let mut entries = Vec::with_capacity(trail.entries.len());
    for (i, e) in trail.entries.iter().enumerate() {
        if let Some(snap) = &e.snapshot {
            for (name, t) in snap {
                tensors.push((format!("trail/{i}/{name}"), t.clone()));
            }
        }
        entries.push(TrailEntryMeta {
            epoch: e.epoch,
            train_loss: e.train_loss,
            clean_metric: e.clean_metric,
            adv_metric: e.adv_metric,
            snapshot: e.snapshot.is_some(),
        });
    }
    let meta = TrainStateMeta {
        config_hash: config_hash.to_string(),
        arch: net.arch,
        in_shape: net.in_shape,
        out_dim: net.out_dim,
        class: trail.class,
        epoch: trail.entries.last().map_or(0, |e| e.epoch),
        diverged: trail.diverged,
        entries,
    };
    let scratch = scratch_stem(stem);
    save_tensors(&scratch, &tensors)?;
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::config(format!("serializing training state: {e}")))?;
    std::fs::write(scratch.with_extension("json"), json + "\n")?;
    std::fs::rename(scratch.with_extension("bin"), stem.with_extension("bin"))?;
    std::fs::rename(scratch.with_extension("json"), stem.with_extension("json"))?;
    Ok(())
}

fn scratch_stem(stem: &Path) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push("-scratch");
    stem.with_file_name(name)
}

/// Load a state written by [`write_state`]. `Ok(None)` means no state file
/// exists yet; a present one must carry the expected config hash.
fn read_state(
    stem: &Path,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<Option<(Network, Sgd, CheckpointTrail)>> {
    let json_path = stem.with_extension("json");
    if !json_path.exists() {
        return Ok(None);
    }
    let f = File::open(&json_path)
        .map_err(|e| Error::load(format!("training state {}: {e}", json_path.display())))?;
    let meta: TrainStateMeta = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::load(format!("parsing {}: {e}", json_path.display())))?;
    if meta.config_hash != config_hash {
        return Err(Error::config(format!(
            "training state {} was written under a different config; delete it to start over",
            stem.display()
        )));
    }
    let tensors = load_tensors(stem)?;
    let mut rng = SeedState::new(0);
    let mut net = build_network(meta.arch, meta.in_shape, meta.out_dim, &mut rng);
    let expected = net.snapshot();
    let net_group = take_group(&tensors, "net/");
    check_group(&net_group, &expected, stem, "network")?;
    net.restore(&net_group);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    sgd.restore(&take_group(&tensors, "opt/"));
    let mut entries = Vec::with_capacity(meta.entries.len());
    for (i, e) in meta.entries.iter().enumerate() {
        let snapshot = if e.snapshot {
            let group = take_group(&tensors, &format!("trail/{i}/"));
            check_group(&group, &expected, stem, &format!("trail entry {i}"))?;
            Some(group)
        } else {
            None
        };
        entries.push(TrailEntry {
            epoch: e.epoch,
            snapshot,
            train_loss: e.train_loss,
            clean_metric: e.clean_metric,
            adv_metric: e.adv_metric,
        });
    }
    let trail = CheckpointTrail {
        class: meta.class,
        entries,
        diverged: meta.diverged,
    };
    Ok(Some((net, sgd, trail)))
}

fn take_group(tensors: &[(String, ArrayD<f64>)], prefix: &str) -> Vec<(String, ArrayD<f64>)> {
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
        .collect()
}

/// A tensor group restored into a freshly built network must cover exactly
/// the names and shapes the architecture expects, or `Network::restore`
/// would panic on data that merely failed to load.
fn check_group(
    group: &[(String, ArrayD<f64>)],
    expected: &[(String, ArrayD<f64>)],
    stem: &Path,
    what: &str,
) -> Result<()> {
    let have: HashMap<&str, &ArrayD<f64>> =
        group.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, t) in expected {
        match have.get(name.as_str()) {
            Some(src) if src.shape() == t.shape() => {}
            Some(src) => {
                return Err(Error::load(format!(
                    "training state {}: {what} tensor {name} has shape {:?}, expected {:?}",
                    stem.display(),
                    src.shape(),
                    t.shape()
                )))
            }
            None => {
                return Err(Error::load(format!(
                    "training state {}: {what} is missing tensor {name}",
                    stem.display()
                )))
            }
        }
    }
    Ok(())
}

/// Continue from a persisted state if one exists (validating that it belongs
/// to this run), otherwise start fresh with `init`.
fn resume_or_fresh(
    state_stem: &Path,
    cfg: &TrainConfig,
    config_hash: &str,
    class: Option<usize>,
    shape: (usize, usize, usize),
    out_dim: usize,
    init: impl FnOnce() -> Network,
) -> Result<RunState> {
    match read_state(state_stem, cfg, config_hash)? {
        Some((net, sgd, trail)) => {
            if trail.class != class {
                return Err(Error::config(format!(
                    "training state {} is for {}, not {}",
                    state_stem.display(),
                    run_name(trail.class),
                    run_name(class)
                )));
            }
            if net.in_shape != shape || net.out_dim != out_dim {
                return Err(Error::config(format!(
                    "training state {} expects inputs {:?} with {} outputs, \
                     the data gives {:?} with {}",
                    state_stem.display(),
                    net.in_shape,
                    net.out_dim,
                    shape,
                    out_dim
                )));
            }
            Ok(RunState {
                net,
                sgd,
                builder: TrailBuilder::from_trail(trail),
            })
        }
        None => Ok(RunState::fresh(init(), cfg, class)),
    }
}

/// Train one binary head on a class partition. Trail metrics (clean and
/// adversarial AUROC at the training ε) are measured on `eval_part`, capped
/// at `eval_cap` samples per side.
pub fn train_binary_head(
    part: &ClassPartition,
    eval_part: &ClassPartition,
    cfg: &TrainConfig,
) -> Result<CheckpointTrail> {
    cfg.validate()?;
    let shape = part.in_dist.image_shape();
    let root = SeedState::new(cfg.seed).fork_indexed("head", part.class as u64);
    let mut rng_init = root.fork("init");
    let net = build_network(cfg.arch, shape, 1, &mut rng_init);
    train_head_net(net, part, eval_part, cfg)
}

/// Inner loop of [`train_binary_head`], taking a pre-built network (tests
/// inject handcrafted ones).
pub fn train_head_net(
    net: Network,
    part: &ClassPartition,
    eval_part: &ClassPartition,
    cfg: &TrainConfig,
) -> Result<CheckpointTrail> {
    cfg.validate()?;
    let state = RunState::fresh(net, cfg, Some(part.class));
    run_head_training(state, part, eval_part, cfg, None, None)
}

/// [`train_binary_head`] with persistent state at `state_stem` (`.bin` plus
/// `.json`). Every trail record is a persist point; a later call continues
/// from the last one and reproduces the uninterrupted run bit-exactly, and a
/// call on a completed state just returns its trail. `stop_after` caps the
/// training epochs run by this call, stopping at the next persist point — an
/// in-process stand-in for an interruption.
pub fn train_head_resumable(
    part: &ClassPartition,
    eval_part: &ClassPartition,
    cfg: &TrainConfig,
    state_stem: &Path,
    stop_after: Option<usize>,
) -> Result<CheckpointTrail> {
    cfg.validate()?;
    let hash = cfg.hash();
    let shape = part.in_dist.image_shape();
    let state = resume_or_fresh(state_stem, cfg, &hash, Some(part.class), shape, 1, || {
        let root = SeedState::new(cfg.seed).fork_indexed("head", part.class as u64);
        build_network(cfg.arch, shape, 1, &mut root.fork("init"))
    })?;
    let persist = PersistTo {
        stem: state_stem,
        config_hash: hash,
    };
    run_head_training(state, part, eval_part, cfg, Some(&persist), stop_after)
}

/// Shared loop of the head trainers. Runs epochs `last+1..=epochs`; every
/// epoch draws its randomness from streams forked on the epoch index, so a
/// resumed run consumes exactly what the uninterrupted one would.
fn run_head_training(
    state: RunState,
    part: &ClassPartition,
    eval_part: &ClassPartition,
    cfg: &TrainConfig,
    persist: Option<&PersistTo<'_>>,
    stop_after: Option<usize>,
) -> Result<CheckpointTrail> {
    let RunState {
        mut net,
        mut sgd,
        mut builder,
    } = state;
    let class = part.class;
    let root = SeedState::new(cfg.seed).fork_indexed("head", class as u64);

    let inner = cfg.inner();
    let eval_budget = inner.with_eps(cfg.eps_out);
    let in_eval = head_rows(&eval_part.in_dist.images, cfg.eval_cap);
    let out_eval = head_rows(&eval_part.out_dist.images, cfg.eval_cap);
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        part.in_dist.len().div_ceil(cfg.batch)
    };

    if builder.trail.entries.is_empty() && builder.trail.diverged.is_none() {
        let probe_loss = bce_pair_loss(&net, &in_eval, &out_eval);
        if !probe_loss.is_finite() {
            builder.trail.diverged = Some((0, 0));
            maybe_persist(persist, &net, &sgd, &builder.trail)?;
            return Ok(builder.trail);
        }
        let mut rng_eval = root.fork_indexed("eval", 0);
        let clean = clean_auroc(&net, &in_eval, &out_eval)?;
        let adv = adversarial_auroc_on(&net, &in_eval, &out_eval, &eval_budget, &mut rng_eval)?;
        builder.record(&net, 0, probe_loss, clean, adv, true);
        maybe_persist(persist, &net, &sgd, &builder.trail)?;
    }
    let start = builder.trail.entries.last().map_or(0, |e| e.epoch);
    if builder.trail.diverged.is_some() || stop_after == Some(0) {
        return Ok(builder.trail);
    }

    for epoch in start + 1..=cfg.epochs {
        let lr = cfg.lr_at(Some(class), epoch);
        let mut rng_data = root.fork_indexed("data", epoch as u64);
        let mut rng_aug = root.fork_indexed("augment", epoch as u64);
        let mut rng_attack = root.fork_indexed("attack", epoch as u64);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let (in_b, out_b) = sample_training_pair(part, cfg.batch, &mut rng_data)?;
            let in_b = augment(&in_b, &cfg.augment, &mut rng_aug);
            let out_b = augment(&out_b, &cfg.augment, &mut rng_aug);
            let (in_adv, out_adv) = adversarial_batches(
                &net,
                &in_b,
                &out_b,
                cfg.eps_in,
                cfg.eps_out,
                &inner,
                &mut rng_attack,
            )?;
            let (loss, grads, tape_i, tape_o) =
                bce_pair_grads(&net, &in_adv, &out_adv, Mode::Train);
            if !loss.is_finite() {
                builder.trail.diverged = Some((epoch, step));
                maybe_persist(persist, &net, &sgd, &builder.trail)?;
                return Ok(builder.trail);
            }
            sgd.step(&mut net, &grads, lr);
            net.apply_bn_updates(&tape_i);
            net.apply_bn_updates(&tape_o);
            epoch_loss += loss;
        }
        if epoch % cfg.eval_interval == 0 || epoch == cfg.epochs {
            let mut rng_eval = root.fork_indexed("eval", epoch as u64);
            let clean = clean_auroc(&net, &in_eval, &out_eval)?;
            let adv =
                adversarial_auroc_on(&net, &in_eval, &out_eval, &eval_budget, &mut rng_eval)?;
            builder.record(
                &net,
                epoch,
                epoch_loss / steps as f64,
                clean,
                adv,
                epoch == cfg.epochs,
            );
            maybe_persist(persist, &net, &sgd, &builder.trail)?;
            if stop_after.is_some_and(|n| epoch - start >= n) {
                return Ok(builder.trail);
            }
        }
    }
    Ok(builder.trail)
}

/// Mean cross-entropy plus parameter gradients for the softmax baseline.
pub fn ce_loss_grads(
    net: &Network,
    x: &ImageBatch,
    labels: &[usize],
    mode: Mode,
) -> (f64, Gradients, Tape) {
    let n = x.shape()[0] as f64;
    let (z, tape) = net.forward(x, mode);
    let loss = crate::attack::ce_values(&z, labels).iter().sum::<f64>() / n;
    let mut gout = softmax_rows(&z);
    for (i, &y) in labels.iter().enumerate() {
        gout[[i, y]] -= 1.0;
    }
    gout.mapv_inplace(|v| v / n);
    let (_, grads) = net.backward(&tape, &gout, true);
    (loss, grads.expect("want_params"), tape)
}

/// Adversarially train the softmax baseline: every batch is replaced by the
/// untargeted cross-entropy attack at ε = `eps_out` before the descent step.
/// Trail metrics are clean and robust accuracy on an `eval_cap`-row subset.
pub fn train_softmax_baseline(
    ds: &LabelledDataset,
    eval_ds: &LabelledDataset,
    cfg: &TrainConfig,
) -> Result<CheckpointTrail> {
    cfg.validate()?;
    let root = SeedState::new(cfg.seed).fork("baseline");
    let mut rng_init = root.fork("init");
    let net = build_network(cfg.arch, ds.image_shape(), ds.num_classes, &mut rng_init);
    train_baseline_net(net, ds, eval_ds, cfg)
}

/// Inner loop of [`train_softmax_baseline`], taking a pre-built network.
pub fn train_baseline_net(
    net: Network,
    ds: &LabelledDataset,
    eval_ds: &LabelledDataset,
    cfg: &TrainConfig,
) -> Result<CheckpointTrail> {
    cfg.validate()?;
    let state = RunState::fresh(net, cfg, None);
    run_baseline_training(state, ds, eval_ds, cfg, None, None)
}

/// [`train_softmax_baseline`] with persistent, resumable state; the contract
/// matches [`train_head_resumable`].
pub fn train_baseline_resumable(
    ds: &LabelledDataset,
    eval_ds: &LabelledDataset,
    cfg: &TrainConfig,
    state_stem: &Path,
    stop_after: Option<usize>,
) -> Result<CheckpointTrail> {
    cfg.validate()?;
    let hash = cfg.hash();
    let shape = ds.image_shape();
    let state = resume_or_fresh(state_stem, cfg, &hash, None, shape, ds.num_classes, || {
        let root = SeedState::new(cfg.seed).fork("baseline");
        build_network(cfg.arch, shape, ds.num_classes, &mut root.fork("init"))
    })?;
    let persist = PersistTo {
        stem: state_stem,
        config_hash: hash,
    };
    run_baseline_training(state, ds, eval_ds, cfg, Some(&persist), stop_after)
}

/// Shared loop of the baseline trainers; same per-epoch rng streams and
/// persist points as [`run_head_training`].
fn run_baseline_training(
    state: RunState,
    ds: &LabelledDataset,
    eval_ds: &LabelledDataset,
    cfg: &TrainConfig,
    persist: Option<&PersistTo<'_>>,
    stop_after: Option<usize>,
) -> Result<CheckpointTrail> {
    let RunState {
        mut net,
        mut sgd,
        mut builder,
    } = state;
    let root = SeedState::new(cfg.seed).fork("baseline");

    let inner = cfg.inner();
    let train_budget = inner.with_eps(cfg.eps_out);

    let n_eval = eval_ds.len().min(cfg.eval_cap);
    let eval_rows: Vec<usize> = (0..n_eval).collect();
    let eval_x = eval_ds.images.select(Axis(0), &eval_rows);
    let eval_y: Vec<usize> = eval_rows.iter().map(|&i| eval_ds.labels[i]).collect();

    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        ds.len().div_ceil(cfg.batch)
    };

    if builder.trail.entries.is_empty() && builder.trail.diverged.is_none() {
        let probe = crate::attack::ce_values(&net.infer(&eval_x), &eval_y)
            .iter()
            .sum::<f64>()
            / n_eval as f64;
        if !probe.is_finite() {
            builder.trail.diverged = Some((0, 0));
            maybe_persist(persist, &net, &sgd, &builder.trail)?;
            return Ok(builder.trail);
        }
        let mut rng_eval = root.fork_indexed("eval", 0);
        let (clean, adv) = baseline_metrics(&net, &eval_x, &eval_y, &train_budget, &mut rng_eval)?;
        builder.record(&net, 0, probe, clean, adv, true);
        maybe_persist(persist, &net, &sgd, &builder.trail)?;
    }
    let start = builder.trail.entries.last().map_or(0, |e| e.epoch);
    if builder.trail.diverged.is_some() || stop_after == Some(0) {
        return Ok(builder.trail);
    }

    for epoch in start + 1..=cfg.epochs {
        let lr = cfg.lr_at(None, epoch);
        let mut rng_data = root.fork_indexed("data", epoch as u64);
        let mut rng_aug = root.fork_indexed("augment", epoch as u64);
        let mut rng_attack = root.fork_indexed("attack", epoch as u64);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let rows: Vec<usize> = (0..cfg.batch.min(ds.len()))
                .map(|_| rng_data.index(ds.len()))
                .collect();
            let x = ds.images.select(Axis(0), &rows);
            let y: Vec<usize> = rows.iter().map(|&i| ds.labels[i]).collect();
            let x = augment(&x, &cfg.augment, &mut rng_aug);
            let x_adv = if cfg.eps_out > 0.0 {
                untargeted_ce_attack(&net, &x, &y, &train_budget, &mut rng_attack)?.adversarial
            } else {
                x
            };
            let (loss, grads, tape) = ce_loss_grads(&net, &x_adv, &y, Mode::Train);
            if !loss.is_finite() {
                builder.trail.diverged = Some((epoch, step));
                maybe_persist(persist, &net, &sgd, &builder.trail)?;
                return Ok(builder.trail);
            }
            sgd.step(&mut net, &grads, lr);
            net.apply_bn_updates(&tape);
            epoch_loss += loss;
        }
        if epoch % cfg.eval_interval == 0 || epoch == cfg.epochs {
            let mut rng_eval = root.fork_indexed("eval", epoch as u64);
            let (clean, adv) =
                baseline_metrics(&net, &eval_x, &eval_y, &train_budget, &mut rng_eval)?;
            builder.record(
                &net,
                epoch,
                epoch_loss / steps as f64,
                clean,
                adv,
                epoch == cfg.epochs,
            );
            maybe_persist(persist, &net, &sgd, &builder.trail)?;
            if stop_after.is_some_and(|n| epoch - start >= n) {
                return Ok(builder.trail);
            }
        }
    }
    Ok(builder.trail)
}

fn baseline_metrics(
    net: &Network,
    x: &ImageBatch,
    y: &[usize],
    budget: &AttackBudget,
    rng: &mut SeedState,
) -> Result<(f64, f64)> {
    let clean = accuracy_of(&net.infer(x), y);
    let adv = if budget.epsilon > 0.0 {
        let res = untargeted_ce_attack(net, x, y, budget, rng)?;
        accuracy_of(&net.infer(&res.adversarial), y)
    } else {
        clean
    };
    Ok((clean, adv))
}

fn accuracy_of(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
