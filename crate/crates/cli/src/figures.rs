//! Interpretability and ablation stages: class-sample generation,
//! counterfactuals, Fréchet-distance tables, and single-axis training
//! sweeps, each with their figures.

use std::path::Path;

use genrc_core::attack::ScalarObjective;
use genrc_core::classifier::load_bundle;
use genrc_core::data::{class_partition, Split};
use genrc_core::error::{Error, Result};
use genrc_core::eval::{evaluate, AttackId, ClassifierModel};
use genrc_core::interp::{
    counterfactual, fid, fit_class_gaussian, generate_class_samples, FeatureExtractor,
};
use genrc_core::nn::io::load_network;
use genrc_core::nn::Network;
use genrc_core::train::train_head_resumable;
use genrc_core::{ImageBatch, SeedState};
use ndarray::{Axis, Slice};
use serde::{Deserialize, Serialize};

use crate::config::{AblationAxis, ExperimentConfig, ExtractorId};
use crate::manifest::RunManifest;
use crate::plot;
use crate::stages::{load_split, net_from_entry, selected_entry, write_json, RunDirs};

/// What the interpret stage produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpretMode {
    /// Gaussian seeds pushed toward each class score.
    Generate,
    /// Real off-class inputs pushed toward a target class.
    Counterfactual,
}

/// Fréchet distances between image sets, in one feature space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidTable {
    pub extractor: String,
    pub rows: Vec<FidRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidRow {
    pub class: usize,
    /// "train-vs-generated", "train-vs-seeds", or "train-vs-counterfactual".
    pub comparison: String,
    pub value: f64,
    /// Size of the compared (non-train) set.
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualTable {
    pub rows: Vec<CounterfactualRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualRow {
    /// Target class the sources were pushed toward.
    pub class: usize,
    pub sources: usize,
    /// Fraction of sources whose prediction flipped to the target.
    pub flip_rate: f64,
    /// Mean perturbation norm actually spent.
    pub mean_norm: f64,
}

/// One ablation sweep: metric pair per grid value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    /// Head the retraining axes swept; ignored by the calibration axis.
    pub class: usize,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    /// Clean AUROC for head axes; standard accuracy for calibration.
    pub clean: f64,
    /// Adversarial AUROC for head axes; robust accuracy for calibration.
    pub adv: f64,
}

fn cap_rows(images: &ImageBatch, cap: usize) -> ImageBatch {
    if images.shape()[0] <= cap {
        images.clone()
    } else {
        images.slice_axis(Axis(0), Slice::from(..cap)).to_owned()
    }
}

/// Generate per-class samples and counterfactuals from the shipped bundle,
/// with Fréchet-distance tables comparing them against real class data.
pub fn cmd_interpret(cfg: &ExperimentConfig, modes: &[InterpretMode]) -> Result<RunManifest> {
    let dirs = RunDirs::new(cfg);
    let mut manifest = RunManifest::load_matching(&dirs.run, cfg)?;
    let (gc, _) = load_bundle(&dirs.bundle)?;
    let train = load_split(cfg, Split::Train)?;
    manifest.record_fingerprint("train", train.fingerprint());
    let k = gc.num_classes();
    if train.num_classes != k {
        return Err(Error::argument(format!(
            "bundle has {k} classes but the dataset has {}",
            train.num_classes
        )));
    }

    // The penultimate extractor borrows the baseline network, so it has to
    // outlive the extractor.
    let baseline_net: Option<Network> = match cfg.interpret.extractor {
        ExtractorId::FlattenPixels => None,
        ExtractorId::BaselinePenultimate => Some(load_network(&dirs.baseline_stem())?.0),
    };
    let extractor = match &baseline_net {
        None => FeatureExtractor::FlattenPixels,
        Some(net) => FeatureExtractor::Penultimate(net),
    };
    let model = ClassifierModel::Generative(&gc);

    let mut fid_rows = Vec::new();
    let mut cf_rows = Vec::new();
    let mut artifacts = Vec::new();
    const TRAIN_CAP: usize = 512;

    if modes.contains(&InterpretMode::Generate) {
        let budget = cfg.interpret.generation_budget();
        for ki in 0..k {
            let part = class_partition(&train, ki)?;
            let stats = fit_class_gaussian(&part.in_dist.images)?;
            let mut rng = SeedState::new(cfg.seed).fork_indexed("interpret-gen", ki);
            let gs = generate_class_samples(
                model,
                &stats,
                ki,
                cfg.interpret.samples_per_class,
                &budget,
                &mut rng,
            )?;
            for (name, batch) in [("samples", &gs.samples), ("seeds", &gs.seeds)] {
                let file = format!("figures/{name}_class_{ki}.png");
                plot::image_grid(batch, cfg.interpret.grid_cols, &dirs.run.join(&file))?;
                artifacts.push(file);
            }
            let train_k = cap_rows(&part.in_dist.images, TRAIN_CAP);
            for (comparison, batch) in
                [("train-vs-generated", &gs.samples), ("train-vs-seeds", &gs.seeds)]
            {
                fid_rows.push(FidRow {
                    class: ki,
                    comparison: comparison.to_string(),
                    value: fid(&extractor, &train_k, batch)?.value,
                    samples: batch.shape()[0],
                });
            }
            let last = &fid_rows[fid_rows.len() - 2..];
            println!(
                "class {ki}: frechet generated {:.4}, seeds {:.4}",
                last[0].value, last[1].value
            );
        }
    }

    if modes.contains(&InterpretMode::Counterfactual) {
        let test = load_split(cfg, Split::Test)?;
        manifest.record_fingerprint("test", test.fingerprint());
        let budget = cfg.interpret.counterfactual_budget();
        for ki in 0..k {
            let sources: Vec<usize> = test
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != ki)
                .map(|(i, _)| i)
                .take(cfg.interpret.counterfactuals_per_class)
                .collect();
            if sources.is_empty() {
                return Err(Error::argument(format!(
                    "no test rows outside class {ki} to push"
                )));
            }
            let x = test.images.select(Axis(0), &sources);
            let cf = counterfactual(model, &x, ki, &budget)?;
            let file = format!("figures/counterfactuals_class_{ki}.png");
            plot::image_grid(&cf.images, cfg.interpret.grid_cols, &dirs.run.join(&file))?;
            artifacts.push(file);

            let n = cf.flipped.len();
            let flip_rate = cf.flipped.iter().filter(|&&f| f).count() as f64 / n as f64;
            let mean_norm = cf.norms.iter().sum::<f64>() / n as f64;
            println!("class {ki}: counterfactual flip rate {flip_rate:.4}, mean norm {mean_norm:.4}");
            cf_rows.push(CounterfactualRow { class: ki, sources: n, flip_rate, mean_norm });
            if n >= 2 {
                let part = class_partition(&train, ki)?;
                fid_rows.push(FidRow {
                    class: ki,
                    comparison: "train-vs-counterfactual".to_string(),
                    value: fid(&extractor, &cap_rows(&part.in_dist.images, TRAIN_CAP), &cf.images)?
                        .value,
                    samples: n,
                });
            }
        }
        write_json(
            &dirs.reports.join("counterfactuals.json"),
            &CounterfactualTable { rows: cf_rows },
        )?;
        artifacts.push("reports/counterfactuals.json".to_string());
    }

    if !fid_rows.is_empty() {
        write_json(
            &dirs.reports.join("fid.json"),
            &FidTable { extractor: extractor.id().to_string(), rows: fid_rows },
        )?;
        artifacts.push("reports/fid.json".to_string());
    }

    manifest.record_stage("interpret", artifacts, vec![]);
    manifest.save(&dirs.run)?;
    Ok(manifest)
}

/// Sweep one training/composition axis across a grid of values.
///
/// Retraining axes (capacity, weight decay, perturbation size, augmentation,
/// in-distribution ε) train one head per grid value and report its clean and
/// adversarial AUROC with a score-histogram figure. The calibration axis
/// compares the shipped bundle with constants zeroed vs fitted.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let ab = cfg
        .ablate
        .as_ref()
        .ok_or_else(|| Error::config("config has no [ablate] section"))?;
    let dirs = RunDirs::new(cfg);
    let mut manifest = RunManifest::load_matching(&dirs.run, cfg)?;

    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    let mut failures = Vec::new();

    if ab.axis.retrains() {
        let train = load_split(cfg, Split::Train)?;
        let val = load_split(cfg, Split::Val)?;
        if ab.class >= train.num_classes {
            return Err(Error::argument(format!(
                "ablation class {} out of range for {} classes",
                ab.class, train.num_classes
            )));
        }
        let part = class_partition(&train, ab.class)?;
        let val_part = class_partition(&val, ab.class)?;
        std::fs::create_dir_all(&dirs.state)?;
        for (i, value) in ab.grid.iter().enumerate() {
            let tcfg = ab.apply(&cfg.train, value)?;
            let stem = dirs.state.join(format!("ablate_{}_{i}", ab.axis.as_str()));
            let trail = train_head_resumable(&part, &val_part, &tcfg, &stem, None)?;
            if let Some((e, s)) = trail.diverged {
                failures.push(format!("{} = {value}: diverged at epoch {e} step {s}", ab.axis.as_str()));
                continue;
            }
            let entry = selected_entry(&trail, cfg.eval.select)?;
            println!(
                "{} = {value}: clean auroc {:.4}, adv auroc {:.4}",
                ab.axis.as_str(),
                entry.clean_metric,
                entry.adv_metric
            );
            rows.push(AblationRow {
                value: value.clone(),
                clean: entry.clean_metric,
                adv: entry.adv_metric,
            });

            let net = net_from_entry(&tcfg, &train, entry);
            let s_in = ScalarObjective::eval(&net, &cap_rows(&val_part.in_dist.images, 512));
            let s_out = ScalarObjective::eval(&net, &cap_rows(&val_part.out_dist.images, 512));
            let file = format!("figures/hist_{}_{i}.png", ab.axis.as_str());
            plot::histogram_pair(
                &format!("head {} scores, {} = {value}", ab.class, ab.axis.as_str()),
                "d(x)",
                ("in-dist", &s_in),
                ("out-dist", &s_out),
                24,
                &dirs.run.join(&file),
            )?;
            artifacts.push(file);
        }
    } else {
        let (mut gc, record) = load_bundle(&dirs.bundle)?;
        let test = load_split(cfg, Split::Test)?;
        manifest.record_fingerprint("test", test.fingerprint());
        let template = cfg.eval.template();
        let eps = [cfg.eval.max_epsilon()];
        for value in &ab.grid {
            gc.calib = match value.as_str() {
                "off" => vec![0.0; gc.num_classes()],
                "on" => record.calib.clone(),
                other => {
                    return Err(Error::config(format!(
                        "calibration grid value {other:?} must be \"on\" or \"off\""
                    )))
                }
            };
            let report = evaluate(
                ClassifierModel::Generative(&gc),
                "generative",
                &test,
                &[AttackId::Adaptive],
                &template,
                &eps,
                cfg.seed,
            )?;
            let adv = report.robust.first().map_or(f64::NAN, |r| r.accuracy);
            println!(
                "calibration {value}: standard {:.4}, robust {:.4} at epsilon {}",
                report.standard_accuracy, adv, eps[0]
            );
            rows.push(AblationRow {
                value: value.clone(),
                clean: report.standard_accuracy,
                adv,
            });
        }
    }

    if rows.is_empty() {
        manifest.record_stage(&format!("ablate-{}", ab.axis.as_str()), artifacts, failures.clone());
        manifest.save(&dirs.run)?;
        return Err(Error::config(format!(
            "every grid value failed: {}",
            failures.join("; ")
        )));
    }

    let table = AblationTable { axis: ab.axis, class: ab.class, rows };
    let table_file = format!("reports/ablation_{}.json", ab.axis.as_str());
    write_json(&dirs.run.join(&table_file), &table)?;
    artifacts.push(table_file);

    let series: Vec<plot::Series> = [("clean", true), ("adv", false)]
        .into_iter()
        .map(|(label, clean)| plot::Series {
            label: label.to_string(),
            points: table
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| (i as f64, if clean { r.clean } else { r.adv }))
                .collect(),
        })
        .collect();
    let chart_file = format!("figures/ablation_{}.png", ab.axis.as_str());
    plot::line_chart(
        &format!("ablation over {}", ab.axis.as_str()),
        &format!("{} grid: {}", ab.axis.as_str(), ab.grid.join(", ")),
        "metric",
        &series,
        &dirs.run.join(&chart_file),
    )?;
    artifacts.push(chart_file);

    manifest.record_stage(&format!("ablate-{}", ab.axis.as_str()), artifacts, failures);
    manifest.save(&dirs.run)?;
    Ok(manifest)
}
