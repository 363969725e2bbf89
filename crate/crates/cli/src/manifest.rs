//! Run manifest: one JSON file per run directory recording the resolved
//! configuration, its hash, dataset fingerprints, and which stages completed
//! with which artifacts. Every figure and table in the run can be traced
//! back to — and regenerated from — this file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use genrc_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one completed stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
    /// Seconds since the Unix epoch when the stage finished.
    pub completed_unix: u64,
    /// Non-fatal per-item failures ("head 3: …"); a stage with failures is
    /// recorded so the salvageable artifacts stay accounted for.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Toolkit version that produced the run.
    pub version: String,
    /// Hash of `config`; stages refuse to mix runs with different hashes.
    pub config_hash: String,
    pub seed: u64,
    /// The fully resolved configuration (environment overrides applied).
    pub config: ExperimentConfig,
    /// Split name → dataset fingerprint, filled in as stages touch data.
    #[serde(default)]
    pub dataset_fingerprints: BTreeMap<String, String>,
    /// Stage name → completion record, overwritten when a stage reruns.
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> RunManifest {
        RunManifest {
            name: config.name.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
            dataset_fingerprints: BTreeMap::new(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<RunManifest> {
        let path = Self::path(run_dir);
        let f = File::open(&path)
            .map_err(|e| Error::load(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::load(format!("parsing manifest {}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let mut f = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut f, self)
            .map_err(|e| Error::config(format!("serializing manifest: {e}")))?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Load the manifest for a follow-on stage, checking it belongs to this
    /// configuration.
    pub fn load_matching(run_dir: &Path, config: &ExperimentConfig) -> Result<RunManifest> {
        let m = Self::load(run_dir).map_err(|e| {
            Error::load(format!("{e}; run the train stage first to create the run"))
        })?;
        if m.config_hash != config.hash() {
            return Err(Error::config(format!(
                "run directory {} belongs to a different configuration \
                 (manifest hash {}, config hash {})",
                run_dir.display(),
                &m.config_hash[..12.min(m.config_hash.len())],
                &config.hash()[..12]
            )));
        }
        Ok(m)
    }

    pub fn record_stage(&mut self, name: &str, artifacts: Vec<String>, failures: Vec<String>) {
        let completed_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.stages.insert(name.to_string(), StageRecord { artifacts, completed_unix, failures });
    }

    pub fn record_fingerprint(&mut self, split: &str, fingerprint: String) {
        self.dataset_fingerprints.insert(split.to_string(), fingerprint);
    }

    /// Check that every recorded artifact still exists under the run
    /// directory. Returns the missing paths.
    pub fn missing_artifacts(&self, run_dir: &Path) -> Vec<String> {
        let mut missing = Vec::new();
        for rec in self.stages.values() {
            for a in &rec.artifacts {
                if !run_dir.join(a).exists() {
                    missing.push(a.clone());
                }
            }
        }
        missing.sort();
        missing.dedup();
        missing
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        toml::from_str(
            r#"
                name = "m"
                out_dir = "/tmp/m"
                [dataset]
                id = "toy-gaussians-2d"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let mut m = RunManifest::new(&cfg);
        m.record_fingerprint("train", "abc".into());
        m.record_stage("train", vec!["bundle/calibration.json".into()], vec![]);
        m.save(dir.path()).unwrap();

        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back.config_hash, cfg.hash());
        assert_eq!(back.dataset_fingerprints["train"], "abc");
        assert_eq!(back.stages["train"].artifacts.len(), 1);
        assert!(back.stages["train"].failures.is_empty());
    }

    #[test]
    fn load_matching_rejects_other_configs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        RunManifest::new(&cfg).save(dir.path()).unwrap();
        assert!(RunManifest::load_matching(dir.path(), &cfg).is_ok());

        let mut other = cfg.clone();
        other.seed = 99;
        let err = RunManifest::load_matching(dir.path(), &other).unwrap_err();
        assert!(err.to_string().contains("different configuration"), "{err}");
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(&config());
        std::fs::write(dir.path().join("real.json"), "{}").unwrap();
        m.record_stage("eval", vec!["real.json".into(), "gone.json".into()], vec![]);
        assert_eq!(m.missing_artifacts(dir.path()), vec!["gone.json".to_string()]);
    }
}
