//! Run directories: manifest, lock, lineage and append-only checkpoints.
//!
//! ```text
//! <run>/manifest.json        RunManifest
//! <run>/config.<stage>.toml  effective config of each stage
//! <run>/checkpoints/{base,dp,ua}
//! <run>/logs/{dp,ua}.jsonl
//! <run>/progress/            resumable alignment state (removed on completion)
//! <run>/reports/
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dpua_core::policy::{load_checkpoint, save_checkpoint, CheckpointManifest, ReferencePolicy};

use crate::config::{RunConfig, Variant};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The policy at initialization.
    Base,
    Dp,
    Ua,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Dp => "dp",
            Stage::Ua => "ua",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: Stage,
    /// Relative to the run directory when inside it, absolute otherwise.
    pub checkpoint: PathBuf,
    pub parent: Option<Stage>,
    pub params_sha256: String,
    pub config_hash: String,
    /// Digest of the effective run config that produced the checkpoint.
    pub run_config_digest: String,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub dataset_path: PathBuf,
    pub dataset_digest: String,
    /// Effective config of the stage that created the run.
    pub config: RunConfig,
    /// Effective config of the alignment stage, once it has run.
    pub ua_config: Option<RunConfig>,
    pub lineage: Vec<LineageEntry>,
    /// Set when the variant has no alignment phase and `train-ua` was asked
    /// to run anyway.
    pub ua_skipped: bool,
    pub created_unix: u64,
    pub updated_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Deterministic run id from task, variant, seed and the config/dataset
/// digests, so repeated runs label their reports identically.
pub fn run_id(cfg: &RunConfig, dataset_digest: &str) -> String {
    let digest = dpua_core::pipeline::content_digest(
        format!("{}|{}", cfg.digest(), dataset_digest).as_bytes(),
    );
    format!(
        "{}-{}-s{}-{}",
        cfg.data.task.name(),
        cfg.variant.name(),
        cfg.seed,
        &digest[..8]
    )
}

/// Write via a temp file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

/// An open, locked run directory. The lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the directory if needed and take the lock.
    pub fn open(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| {
                format!(
                    "run directory {} is locked by another process (remove {} if it is stale)",
                    root.display(),
                    lock.display()
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.name())
    }

    pub fn logs_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = self.root.join("logs");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn has_manifest(&self) -> bool {
        self.root.join(MANIFEST_FILE).exists()
    }

    pub fn load_manifest(&self) -> anyhow::Result<RunManifest> {
        read_manifest(&self.root)
    }

    pub fn save_manifest(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        manifest.updated_unix = unix_now();
        let json = serde_json::to_string_pretty(manifest)?;
        write_atomic(&self.root.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn write_config_snapshot(&self, stage: Stage, cfg: &RunConfig) -> anyhow::Result<()> {
        let path = self.root.join(format!("config.{}.toml", stage.name()));
        if path.exists() {
            bail!("{} already exists", path.display());
        }
        write_atomic(&path, cfg.to_toml().as_bytes())
    }

    /// Save a stage checkpoint and record it in the lineage. Never overwrites.
    pub fn commit_checkpoint(
        &self,
        manifest: &mut RunManifest,
        stage: Stage,
        parent: Option<Stage>,
        policy: &ReferencePolicy,
        cfg: &RunConfig,
    ) -> anyhow::Result<CheckpointManifest> {
        if manifest.lineage.iter().any(|e| e.stage == stage) {
            bail!("run already has a {} checkpoint", stage.name());
        }
        let dir = self.checkpoint_dir(stage);
        let saved = save_checkpoint(policy, &dir)?;
        manifest.lineage.push(LineageEntry {
            stage,
            checkpoint: PathBuf::from("checkpoints").join(stage.name()),
            parent,
            params_sha256: saved.params_sha256.clone(),
            config_hash: saved.config_hash.clone(),
            run_config_digest: cfg.digest(),
            created_unix: unix_now(),
        });
        self.save_manifest(manifest)?;
        Ok(saved)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

pub fn read_manifest(root: &Path) -> anyhow::Result<RunManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl RunManifest {
    pub fn entry(&self, stage: Stage) -> Option<&LineageEntry> {
        self.lineage.iter().find(|e| e.stage == stage)
    }

    /// Latest checkpoint in the lineage (ua, then dp, then base).
    pub fn latest(&self) -> Option<&LineageEntry> {
        [Stage::Ua, Stage::Dp, Stage::Base]
            .into_iter()
            .find_map(|s| self.entry(s))
    }

    pub fn resolve(&self, root: &Path, entry: &LineageEntry) -> PathBuf {
        if entry.checkpoint.is_absolute() {
            entry.checkpoint.clone()
        } else {
            root.join(&entry.checkpoint)
        }
    }

    /// Load a lineage checkpoint and check it still matches its recorded hash.
    pub fn load_stage(&self, root: &Path, stage: Stage) -> anyhow::Result<ReferencePolicy> {
        let entry = self
            .entry(stage)
            .with_context(|| format!("run has no {} checkpoint", stage.name()))?;
        let dir = self.resolve(root, entry);
        let policy = load_checkpoint(&dir)
            .with_context(|| format!("loading checkpoint {}", dir.display()))?;
        let found = checkpoint_sha(&dir)?;
        if found != entry.params_sha256 {
            bail!("checkpoint {} changed since it was recorded", dir.display());
        }
        Ok(policy)
    }

    /// Effective config of the latest stage.
    pub fn latest_config(&self) -> &RunConfig {
        self.ua_config.as_ref().unwrap_or(&self.config)
    }
}

/// `params_sha256` recorded in a checkpoint's own manifest.
pub fn checkpoint_sha(dir: &Path) -> anyhow::Result<String> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    Ok(manifest.params_sha256)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path()).unwrap();
        assert!(RunDir::open(dir.path()).is_err());
        drop(a);
        assert!(RunDir::open(dir.path()).is_ok());
    }

    #[test]
    fn run_id_is_a_function_of_config_and_data() {
        let cfg = RunConfig::default();
        assert_eq!(run_id(&cfg, "abc"), run_id(&cfg, "abc"));
        assert_ne!(run_id(&cfg, "abc"), run_id(&cfg, "abd"));
        let other = RunConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(run_id(&cfg, "abc"), run_id(&other, "abc"));
        assert!(run_id(&cfg, "abc").starts_with("sarcasm-full-s0-"));
    }
}
