//! Stage commands behind the CLI verbs. Each stage reads the experiment
//! config, does its work under the run directory, and records what it
//! produced in the run manifest:
//!
//! - `train` — per-class heads + softmax baseline, resumable per head
//! - `calibrate` — fit the additive constants on the validation split
//! - `eval` — robust-accuracy sweeps for both classifier families
//! - `report` — verify artifacts and render the run summary

use std::fs;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use genrc_core::classifier::{
    load_bundle, save_bundle, CalibrationRecord, GenerativeClassifier,
};
use genrc_core::data::{class_partition, load_dataset_with, LabelledDataset, Split};
use genrc_core::error::{Error, Result};
use genrc_core::eval::{evaluate, AttackId, ClassifierModel, EvalReport};
use genrc_core::nn::arch::build_network;
use genrc_core::nn::io::{load_meta, load_network, save_checkpoint, CheckpointMeta};
use genrc_core::nn::Network;
use genrc_core::train::{
    train_baseline_resumable, train_head_resumable, BinaryHead, CheckpointTrail, SelectMetric,
    TrailEntry, TrainConfig,
};
use genrc_core::SeedState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::plot;

/// Directory layout of one run.
pub struct RunDirs {
    pub run: PathBuf,
    /// Resumable training state; safe to delete once training is complete.
    pub state: PathBuf,
    /// The shipped classifier: head checkpoints + calibration record.
    pub bundle: PathBuf,
    pub baseline: PathBuf,
    pub reports: PathBuf,
    pub figures: PathBuf,
}

impl RunDirs {
    pub fn new(cfg: &ExperimentConfig) -> RunDirs {
        let run = cfg.out_dir.clone();
        RunDirs {
            state: run.join("state"),
            bundle: run.join("bundle"),
            baseline: run.join("baseline"),
            reports: run.join("reports"),
            figures: run.join("figures"),
            run,
        }
    }

    pub fn create(&self) -> Result<()> {
        for d in [&self.run, &self.state, &self.bundle, &self.baseline, &self.reports, &self.figures]
        {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }

    pub fn baseline_stem(&self) -> PathBuf {
        self.baseline.join("baseline")
    }
}

pub(crate) fn attack_label(a: AttackId) -> &'static str {
    match a {
        AttackId::UntargetedCe => "untargeted-ce",
        AttackId::Adaptive => "adaptive",
    }
}

pub(crate) fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<LabelledDataset> {
    load_dataset_with(cfg.dataset.id, &cfg.dataset.root, split, &cfg.dataset.options)
}

/// First entry maximizing the selection metric. The trail keeps a weight
/// snapshot exactly when an entry improves a running best, so the entry this
/// picks always carries one.
pub(crate) fn selected_entry(
    trail: &CheckpointTrail,
    metric: SelectMetric,
) -> Result<&TrailEntry> {
    let mut best: Option<&TrailEntry> = None;
    for e in &trail.entries {
        if best.map_or(true, |b| e.metric(metric) > b.metric(metric)) {
            best = Some(e);
        }
    }
    let e = best.ok_or_else(|| Error::config("training trail is empty"))?;
    if e.snapshot.is_none() {
        return Err(Error::config(format!(
            "trail entry at epoch {} has no weight snapshot",
            e.epoch
        )));
    }
    Ok(e)
}

/// Rebuild a network from a trail entry's weight snapshot.
pub(crate) fn net_from_entry(cfg: &TrainConfig, ds: &LabelledDataset, entry: &TrailEntry) -> Network {
    let mut rng = SeedState::new(0).fork("rebuild");
    let mut net = build_network(cfg.arch, ds.image_shape(), 1, &mut rng);
    net.restore(entry.snapshot.as_ref().expect("selected entry has a snapshot"));
    net
}

/// Content hash over every file in a directory, order-independent.
pub(crate) fn hash_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in &names {
        h.update(n.as_bytes());
        h.update(fs::read(dir.join(n))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::load(format!("parsing {}: {e}", path.display())))
}

fn per_class_counts(ds: &LabelledDataset) -> Vec<usize> {
    let mut counts = vec![0usize; ds.num_classes];
    for &l in &ds.labels {
        counts[l] += 1;
    }
    counts
}

/// Train every head and the softmax baseline, then assemble the classifier
/// bundle. Per-head training state persists under `state/`, so an
/// interrupted run continues where it stopped; finished heads are not
/// retrained. Without `resume`, existing state is cleared first.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool, jobs: usize) -> Result<RunManifest> {
    let dirs = RunDirs::new(cfg);
    if RunManifest::path(&dirs.run).exists() {
        // Refuse to mix two configurations in one run directory.
        RunManifest::load_matching(&dirs.run, cfg)?;
    }
    if !resume && dirs.state.exists() {
        fs::remove_dir_all(&dirs.state)?;
    }
    dirs.create()?;

    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let k = train.num_classes;
    let mut manifest = RunManifest::new(cfg);
    manifest.record_fingerprint("train", train.fingerprint());
    manifest.record_fingerprint("val", val.fingerprint());

    let parts: Vec<_> = (0..k).map(|i| class_partition(&train, i)).collect::<Result<_>>()?;
    let val_parts: Vec<_> = (0..k).map(|i| class_partition(&val, i)).collect::<Result<_>>()?;
    let stems: Vec<PathBuf> = (0..k).map(|i| dirs.state.join(format!("head_{i}"))).collect();

    // Heads are independent; run `jobs` of them at a time.
    let mut trails: Vec<Option<Result<CheckpointTrail>>> = (0..k).map(|_| None).collect();
    let indices: Vec<usize> = (0..k).collect();
    for chunk in indices.chunks(jobs.max(1)) {
        let outcomes = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    s.spawn(move || {
                        train_head_resumable(&parts[i], &val_parts[i], &cfg.train, &stems[i], None)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::config("head trainer panicked")))
                })
                .collect::<Vec<_>>()
        });
        for (&i, outcome) in chunk.iter().zip(outcomes) {
            trails[i] = Some(outcome);
        }
    }

    let mut failures = Vec::new();
    let mut heads = Vec::new();
    let mut metas = Vec::new();
    for (i, slot) in trails.iter().enumerate() {
        match slot.as_ref().expect("every head ran") {
            Ok(trail) if trail.diverged.is_none() => {
                let entry = selected_entry(trail, cfg.eval.select)?;
                println!(
                    "head {i}: selected epoch {} (clean {:.4}, adv {:.4})",
                    entry.epoch, entry.clean_metric, entry.adv_metric
                );
                heads.push(BinaryHead { net: net_from_entry(&cfg.train, &train, entry), class: i });
                metas.push(CheckpointMeta {
                    arch: cfg.train.arch,
                    class_index: Some(i),
                    in_shape: train.image_shape(),
                    out_dim: 1,
                    epoch: entry.epoch,
                    config_hash: cfg.train.hash(),
                    train_loss: entry.train_loss,
                    clean_metric: entry.clean_metric,
                    adv_metric: entry.adv_metric,
                });
            }
            Ok(trail) => {
                let (e, s) = trail.diverged.expect("checked");
                failures.push(format!("head {i}: diverged at epoch {e} step {s}"));
            }
            Err(e) => failures.push(format!("head {i}: {e}")),
        }
    }

    // The baseline trains like one more job; its failure is isolated too.
    let mut artifacts = Vec::new();
    let bcfg = cfg.baseline_config();
    match train_baseline_resumable(&train, &val, bcfg, &dirs.state.join("baseline"), None) {
        Ok(trail) if trail.diverged.is_none() => {
            let entry = selected_entry(&trail, cfg.eval.select)?;
            println!(
                "baseline: selected epoch {} (clean {:.4}, adv {:.4})",
                entry.epoch, entry.clean_metric, entry.adv_metric
            );
            let meta = CheckpointMeta {
                arch: bcfg.arch,
                class_index: None,
                in_shape: train.image_shape(),
                out_dim: k,
                epoch: entry.epoch,
                config_hash: bcfg.hash(),
                train_loss: entry.train_loss,
                clean_metric: entry.clean_metric,
                adv_metric: entry.adv_metric,
            };
            let snap = entry.snapshot.as_ref().expect("selected entry has a snapshot");
            save_checkpoint(&dirs.baseline_stem(), snap, &meta)?;
            artifacts.push("baseline/baseline.bin".to_string());
            artifacts.push("baseline/baseline.json".to_string());
        }
        Ok(trail) => {
            let (e, s) = trail.diverged.expect("checked");
            failures.push(format!("baseline: diverged at epoch {e} step {s}"));
        }
        Err(e) => failures.push(format!("baseline: {e}")),
    }

    if heads.len() == k {
        let mut gc = GenerativeClassifier::new(heads)?;
        gc.set_priors_from_counts(&per_class_counts(&train))?;
        let record = CalibrationRecord {
            calib: gc.calib.clone(),
            log_priors: gc.log_priors.clone(),
            config_hash: cfg.hash(),
            val_fingerprint: String::new(),
            outcome: None,
        };
        save_bundle(&dirs.bundle, &gc, &metas, &record)?;
        for i in 0..k {
            artifacts.push(format!("bundle/head_{i}.bin"));
            artifacts.push(format!("bundle/head_{i}.json"));
        }
        artifacts.push("bundle/calibration.json".to_string());
    }

    manifest.record_stage("train", artifacts, failures.clone());
    manifest.save(&dirs.run)?;
    if failures.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::config(format!(
            "{} of {} training jobs failed — rerun with --resume to continue the rest: {}",
            failures.len(),
            k + 1,
            failures.join("; ")
        )))
    }
}

/// Fit the calibration constants on the validation split and rewrite the
/// bundle's calibration record.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dirs = RunDirs::new(cfg);
    let mut manifest = RunManifest::load_matching(&dirs.run, cfg)?;
    let (mut gc, mut record) = load_bundle(&dirs.bundle)?;
    let val = load_split(cfg, Split::Val)?;
    manifest.record_fingerprint("val", val.fingerprint());

    let outcome = gc.calibrate(&val, &cfg.calibration)?;
    println!(
        "calibration: {} iterations, fit ce {:.6}, holdout ce {:.6}",
        outcome.iterations, outcome.fit_ce, outcome.holdout_ce
    );
    if !outcome.missing_classes.is_empty() {
        println!(
            "calibration: classes {:?} absent from the validation split",
            outcome.missing_classes
        );
    }

    record.calib = gc.calib.clone();
    record.log_priors = gc.log_priors.clone();
    record.config_hash = cfg.hash();
    record.val_fingerprint = val.fingerprint();
    record.outcome = Some(outcome);

    let metas: Vec<CheckpointMeta> = (0..gc.num_classes())
        .map(|i| load_meta(&dirs.bundle.join(format!("head_{i}"))))
        .collect::<Result<_>>()?;
    save_bundle(&dirs.bundle, &gc, &metas, &record)?;

    manifest.record_stage("calibrate", vec!["bundle/calibration.json".to_string()], vec![]);
    manifest.save(&dirs.run)?;
    Ok(manifest)
}

/// Evaluation artifact: the report plus the hashes identifying exactly which
/// classifier and attack configuration produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub bundle_hash: String,
    pub attack_hash: String,
    pub report: EvalReport,
}

/// Robust-accuracy sweeps for the generative classifier (all configured
/// attacks) and the softmax baseline (cross-entropy attack only).
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dirs = RunDirs::new(cfg);
    let mut manifest = RunManifest::load_matching(&dirs.run, cfg)?;
    let (gc, _) = load_bundle(&dirs.bundle)?;
    let test = load_split(cfg, Split::Test)?;
    manifest.record_fingerprint("test", test.fingerprint());

    let template = cfg.eval.template();
    let attack_hash = {
        let json = serde_json::to_string(&(&template, &cfg.eval.attacks, &cfg.eval.epsilons))
            .expect("attack config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    };
    let bundle_hash = hash_dir(&dirs.bundle)?;

    let mut reports = Vec::new();
    let mut gen_report = evaluate(
        ClassifierModel::Generative(&gc),
        "generative",
        &test,
        &cfg.eval.attacks,
        &template,
        &cfg.eval.epsilons,
        cfg.seed,
    )?;
    // Wall-clock time would make reruns differ byte-for-byte.
    gen_report.wall_clock_secs = None;
    reports.push(("eval_generative.json", gen_report));

    let (baseline_net, _) = load_network(&dirs.baseline_stem())?;
    let ce_only: Vec<AttackId> = cfg
        .eval
        .attacks
        .iter()
        .copied()
        .filter(|a| *a == AttackId::UntargetedCe)
        .collect();
    let mut soft_report = evaluate(
        ClassifierModel::Softmax(&baseline_net),
        "softmax",
        &test,
        &ce_only,
        &template,
        &cfg.eval.epsilons,
        cfg.seed,
    )?;
    soft_report.wall_clock_secs = None;
    reports.push(("eval_softmax.json", soft_report));

    let mut artifacts = Vec::new();
    let mut series = Vec::new();
    for (file, report) in &reports {
        println!("{}: standard accuracy {:.4}", report.model, report.standard_accuracy);
        for attack in &cfg.eval.attacks {
            let points: Vec<(f64, f64)> = report
                .robust
                .iter()
                .filter(|r| r.attack == *attack)
                .map(|r| (r.epsilon, r.accuracy))
                .collect();
            if let Some(last) = points.last() {
                println!(
                    "{}: {} robust accuracy {:.4} at epsilon {}",
                    report.model,
                    attack_label(*attack),
                    last.1,
                    last.0
                );
            }
            if !points.is_empty() {
                series.push(plot::Series {
                    label: format!("{}/{}", report.model, attack_label(*attack)),
                    points,
                });
            }
        }
        write_json(
            &dirs.reports.join(file),
            &EvalArtifact {
                bundle_hash: bundle_hash.clone(),
                attack_hash: attack_hash.clone(),
                report: report.clone(),
            },
        )?;
        artifacts.push(format!("reports/{file}"));
    }

    plot::line_chart(
        "robust accuracy under attack",
        "epsilon",
        "accuracy",
        &series,
        &dirs.figures.join("sweep.png"),
    )?;
    artifacts.push("figures/sweep.png".to_string());

    manifest.record_stage("eval", artifacts, vec![]);
    manifest.save(&dirs.run)?;
    Ok(manifest)
}

/// Verify the manifest's artifacts and render the run summary, both to
/// stdout and to `reports/summary.txt`. The summary carries no timestamps,
/// so rerunning the stage rewrites an identical file.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dirs = RunDirs::new(cfg);
    let mut manifest = RunManifest::load_matching(&dirs.run, cfg)?;
    let missing = manifest.missing_artifacts(&dirs.run);
    if !missing.is_empty() {
        return Err(Error::load(format!(
            "{} recorded artifact(s) missing from {}: {}",
            missing.len(),
            dirs.run.display(),
            missing.join(", ")
        )));
    }
    let text = render_summary(&manifest, &dirs)?;
    fs::create_dir_all(&dirs.reports)?;
    fs::write(dirs.reports.join("summary.txt"), &text)?;
    print!("{text}");
    manifest.record_stage("report", vec!["reports/summary.txt".to_string()], vec![]);
    manifest.save(&dirs.run)?;
    Ok(manifest)
}

fn render_summary(manifest: &RunManifest, dirs: &RunDirs) -> Result<String> {
    use std::fmt::Write;
    let mut s = String::new();
    let mut w = |line: String| {
        writeln!(s, "{line}").expect("string write");
    };
    w(format!("run: {} (toolkit {})", manifest.name, manifest.version));
    w(format!("config hash: {}", &manifest.config_hash[..12]));
    for (split, fp) in &manifest.dataset_fingerprints {
        w(format!("data {split}: {}", &fp[..12.min(fp.len())]));
    }
    for (name, rec) in &manifest.stages {
        let mut line = format!("stage {name}: {} artifact(s)", rec.artifacts.len());
        if !rec.failures.is_empty() {
            line.push_str(&format!(", {} failure(s)", rec.failures.len()));
        }
        w(line);
        for f in &rec.failures {
            w(format!("  failed: {f}"));
        }
    }

    let calibration = dirs.bundle.join("calibration.json");
    if calibration.exists() {
        let record: CalibrationRecord = read_json(&calibration)?;
        match &record.outcome {
            Some(o) => w(format!(
                "calibration: {} iteration(s), fit ce {:.6}, holdout ce {:.6}",
                o.iterations, o.fit_ce, o.holdout_ce
            )),
            None => w("calibration: constants at zero (not yet fitted)".to_string()),
        }
    }
    for file in ["eval_generative.json", "eval_softmax.json"] {
        let path = dirs.reports.join(file);
        if !path.exists() {
            continue;
        }
        let artifact: EvalArtifact = read_json(&path)?;
        let r = &artifact.report;
        w(format!("{}: standard accuracy {:.4}", r.model, r.standard_accuracy));
        for p in &r.robust {
            w(format!(
                "{}: {} epsilon {} accuracy {:.4}",
                r.model,
                attack_label(p.attack),
                p.epsilon,
                p.accuracy
            ));
        }
    }
    let fid = dirs.reports.join("fid.json");
    if fid.exists() {
        let table: crate::figures::FidTable = read_json(&fid)?;
        for row in &table.rows {
            w(format!(
                "frechet[{}] class {} {}: {:.4} ({} samples)",
                table.extractor, row.class, row.comparison, row.value, row.samples
            ));
        }
    }
    let cf = dirs.reports.join("counterfactuals.json");
    if cf.exists() {
        let table: crate::figures::CounterfactualTable = read_json(&cf)?;
        for row in &table.rows {
            w(format!(
                "counterfactuals to class {}: flip rate {:.4}, mean norm {:.4} ({} sources)",
                row.class, row.flip_rate, row.mean_norm, row.sources
            ));
        }
    }
    if let Some(ab) = &manifest.config.ablate {
        let path = dirs.reports.join(format!("ablation_{}.json", ab.axis.as_str()));
        if path.exists() {
            let table: crate::figures::AblationTable = read_json(&path)?;
            for row in &table.rows {
                w(format!(
                    "ablation {} = {}: clean {:.4}, adv {:.4}",
                    table.axis.as_str(),
                    row.value,
                    row.clean,
                    row.adv
                ));
            }
        }
    }
    Ok(s)
}
