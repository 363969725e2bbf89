//! Experiment configuration: one TOML file describes a full run — dataset,
//! head/baseline training, calibration, evaluation, interpretability, and an
//! optional ablation — and every stage command reads the same file.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use genrc_core::attack::{AttackBudget, NormKind};
use genrc_core::classifier::CalibrationConfig;
use genrc_core::data::{DatasetId, LoadOptions};
use genrc_core::error::{Error, Result};
use genrc_core::eval::AttackId;
use genrc_core::train::{SelectMetric, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Name of the environment variable overriding `dataset.root`.
pub const DATA_ROOT_VAR: &str = "GENRC_DATA_ROOT";
/// Name of the environment variable overriding `out_dir`.
pub const OUT_DIR_VAR: &str = "GENRC_OUT_DIR";

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Human-readable run name, stamped into the manifest.
    pub name: String,
    /// Run directory for all artifacts.
    pub out_dir: PathBuf,
    /// Master seed for evaluation and interpretability randomness; training
    /// seeds live in the train sections.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Softmax baseline overrides; when absent the baseline trains under the
    /// same settings as the heads.
    #[serde(default)]
    pub baseline: Option<TrainConfig>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub interpret: InterpretSection,
    #[serde(default)]
    pub ablate: Option<AblateSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub id: DatasetId,
    /// Directory holding on-disk dataset files; ignored by the synthetic
    /// datasets.
    #[serde(default)]
    pub root: PathBuf,
    #[serde(default)]
    pub options: LoadOptions,
}

/// Shared attack-evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Attacks run against the generative classifier; the softmax baseline
    /// only supports the cross-entropy attack.
    pub attacks: Vec<AttackId>,
    /// Sweep budgets, ascending.
    pub epsilons: Vec<f64>,
    pub norm: NormKind,
    pub steps: usize,
    pub random_start: bool,
    pub restarts: usize,
    /// Which trail metric picks the shipped snapshot per head.
    pub select: SelectMetric,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            attacks: vec![AttackId::UntargetedCe, AttackId::Adaptive],
            epsilons: vec![0.0, 0.1, 0.3],
            norm: NormKind::L2,
            steps: 20,
            random_start: true,
            restarts: 1,
            select: SelectMetric::Adv,
        }
    }
}

impl EvalSection {
    pub fn max_epsilon(&self) -> f64 {
        self.epsilons.iter().copied().fold(0.0, f64::max)
    }

    /// Budget template the sweep rescales per ε.
    pub fn template(&self) -> AttackBudget {
        let mut t = AttackBudget::evaluation(self.norm, 0.0);
        t.steps = self.steps;
        t.random_start = self.random_start;
        t.restarts = self.restarts;
        t.with_epsilon(self.max_epsilon())
    }

    fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::config("eval needs at least one attack"));
        }
        if self.epsilons.is_empty() {
            return Err(Error::config("eval needs at least one epsilon"));
        }
        for &e in &self.epsilons {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::config(format!("eval epsilon {e} must be finite and ≥ 0")));
            }
        }
        if self.epsilons.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("eval epsilons must be sorted ascending"));
        }
        if self.steps == 0 {
            return Err(Error::config("eval attack needs ≥ 1 step"));
        }
        if self.restarts == 0 {
            return Err(Error::config("eval attack needs ≥ 1 restart"));
        }
        Ok(())
    }
}

/// Feature space for the Fréchet distance tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorId {
    /// Raw pixels — cheap and model-free.
    FlattenPixels,
    /// Penultimate features of the trained softmax baseline.
    BaselinePenultimate,
}

/// Sample-generation and counterfactual settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub samples_per_class: usize,
    pub counterfactuals_per_class: usize,
    /// Gradient steps for both generation and counterfactual pushes.
    pub steps: usize,
    pub step_size: f64,
    pub norm: NormKind,
    /// Generation budget; 0 means unconstrained (steps × step size).
    pub epsilon: f64,
    /// Counterfactual search radius.
    pub counterfactual_epsilon: f64,
    pub extractor: ExtractorId,
    /// Columns of the sample-grid figures.
    pub grid_cols: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection {
            samples_per_class: 16,
            counterfactuals_per_class: 16,
            steps: 10,
            step_size: 1.0,
            norm: NormKind::L2,
            epsilon: 0.0,
            counterfactual_epsilon: 1.0,
            extractor: ExtractorId::FlattenPixels,
            grid_cols: 8,
        }
    }
}

impl InterpretSection {
    /// Budget for pushing Gaussian seeds toward a class score. No random
    /// start, so a generated sample never scores below its seed.
    pub fn generation_budget(&self) -> AttackBudget {
        let eps = if self.epsilon > 0.0 {
            self.epsilon
        } else {
            self.steps as f64 * self.step_size
        };
        AttackBudget {
            norm: self.norm,
            epsilon: eps,
            steps: self.steps,
            step_size: self.step_size,
            random_start: false,
            restarts: 1,
        }
    }

    pub fn counterfactual_budget(&self) -> AttackBudget {
        AttackBudget {
            norm: self.norm,
            epsilon: self.counterfactual_epsilon,
            steps: self.steps,
            step_size: self.step_size,
            random_start: false,
            restarts: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples_per_class < 2 {
            return Err(Error::config("need ≥ 2 samples per class for the distance tables"));
        }
        if self.counterfactuals_per_class == 0 {
            return Err(Error::config("need ≥ 1 counterfactual per class"));
        }
        if self.grid_cols == 0 {
            return Err(Error::config("figure grids need ≥ 1 column"));
        }
        self.generation_budget().validate()?;
        self.counterfactual_budget().validate()
    }
}

/// One sweepable training/composition axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Calibrated vs uncalibrated composition of an existing bundle.
    Calibration,
    /// Network architecture per grid value.
    Capacity,
    WeightDecay,
    /// Out-distribution training ε per grid value.
    PerturbationSize,
    /// Augmentation policy: "none", "pad-crop-flip", "autoaugment".
    Augmentation,
    /// In-distribution ε added on top of the out-distribution objective.
    InOutAt,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::Calibration => "calibration",
            AblationAxis::Capacity => "capacity",
            AblationAxis::WeightDecay => "weight-decay",
            AblationAxis::PerturbationSize => "perturbation-size",
            AblationAxis::Augmentation => "augmentation",
            AblationAxis::InOutAt => "in-out-at",
        }
    }

    /// True for axes that retrain a single head per grid value.
    pub fn retrains(&self) -> bool {
        !matches!(self, AblationAxis::Calibration)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub axis: AblationAxis,
    /// Grid values, parsed per axis ("0.3", "smallcnn", "on"/"off", …).
    pub grid: Vec<String>,
    /// Head retrained by the per-head axes.
    #[serde(default)]
    pub class: usize,
}

impl AblateSection {
    /// Training config for one grid value of a retraining axis.
    pub fn apply(&self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let bad = |what: &str| {
            Error::config(format!("ablation grid value {value:?} is not a valid {what}"))
        };
        match self.axis {
            AblationAxis::Calibration => {
                if value != "on" && value != "off" {
                    return Err(bad("calibration switch (\"on\" or \"off\")"));
                }
            }
            AblationAxis::Capacity => {
                cfg.arch = genrc_core::nn::ArchId::parse(value)
                    .ok_or_else(|| bad("architecture"))?;
            }
            AblationAxis::WeightDecay => {
                cfg.weight_decay = value.parse().map_err(|_| bad("weight decay"))?;
            }
            AblationAxis::PerturbationSize => {
                cfg.eps_out = value.parse().map_err(|_| bad("perturbation size"))?;
            }
            AblationAxis::Augmentation => {
                cfg.augment = match value {
                    "none" => genrc_core::data::AugmentPolicy::None,
                    "pad-crop-flip" => genrc_core::data::AugmentPolicy::PadCropFlip { pad: 4 },
                    "autoaugment" => {
                        genrc_core::data::AugmentPolicy::Autoaugment { magnitude: 0.5 }
                    }
                    _ => return Err(bad("augmentation policy")),
                };
            }
            AblationAxis::InOutAt => {
                cfg.eps_in = value.parse().map_err(|_| bad("in-distribution epsilon"))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self, base: &TrainConfig) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("ablation grid is empty"));
        }
        for v in &self.grid {
            self.apply(base, v)?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parse a TOML file and apply environment overrides.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::load(format!("config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        if let Ok(root) = env::var(DATA_ROOT_VAR) {
            cfg.dataset.root = PathBuf::from(root);
        }
        if let Ok(out) = env::var(OUT_DIR_VAR) {
            cfg.out_dir = PathBuf::from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("experiment name is empty"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir is empty"));
        }
        self.train.validate()?;
        if let Some(b) = &self.baseline {
            b.validate()?;
        }
        self.calibration.validate()?;
        self.eval.validate()?;
        self.interpret.validate()?;
        if let Some(a) = &self.ablate {
            a.validate(&self.train)?;
        }
        Ok(())
    }

    /// Baseline training settings: explicit section or the head settings.
    pub fn baseline_config(&self) -> &TrainConfig {
        self.baseline.as_ref().unwrap_or(&self.train)
    }

    /// Content hash of the resolved configuration. Stable across load/save
    /// round trips because it hashes the serialized form, not the file text.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}
