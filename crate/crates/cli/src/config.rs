//! Run configuration: one TOML document with a section per stage.
//!
//! Every numeric hyperparameter lives here; the only environment overrides
//! are the remote judge endpoint and key. A missing section or key takes its
//! default, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dpua_core::grpo::{AlignConfig, JudgeChoice};
use dpua_core::metrics::{ConfidenceSource, EvalOptions};
use dpua_core::perception::{PerceptionConfig, TrainingMode};
use dpua_core::pipeline::{content_digest, DEFAULT_VOCAB_SIZE};
use dpua_core::policy::PolicyConfig;
use dpua_core::reward::{MockJudge, RemoteJudgeConfig};
use dpua_core::TaskKind;

/// Named pipeline variants. `full` leaves the sections as written; the
/// ablations override the fields they are defined by.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Phase 1 on hard labels only (`perception.mode = sft_plain`).
    WoDp,
    /// Phase 1 with uniform segment weights (`perception.mode = sft_star`).
    WoDl,
    /// No alignment phase; the Phase-1 checkpoint is final.
    WoUa,
    /// Alignment without the reasoning reward.
    WoUrr,
    /// Alignment without the calibration reward.
    WoUcr,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoDp => "wo_dp",
            Variant::WoDl => "wo_dl",
            Variant::WoUa => "wo_ua",
            Variant::WoUrr => "wo_urr",
            Variant::WoUcr => "wo_ucr",
        }
    }

    pub fn has_alignment(self) -> bool {
        self != Variant::WoUa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    /// Line-delimited dataset written by `dpua prepare`.
    pub path: PathBuf,
    /// Ignore unknown record fields instead of rejecting them.
    pub lenient: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Sarcasm,
            path: PathBuf::new(),
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub context_window: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_target_len: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PolicyConfig::desk();
        Self {
            embed_dim: p.embed_dim,
            context_window: p.context_window,
            hidden_dim: p.hidden_dim,
            heads: p.heads,
            max_target_len: p.max_target_len,
            max_seq_len: p.max_seq_len,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            embed_dim: self.embed_dim,
            context_window: self.context_window,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            max_target_len: self.max_target_len,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Save resumable alignment progress every this many steps.
    pub checkpoint_every: usize,
    /// Threads used for evaluation.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 25,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, batch order and rollout sampling.
    pub seed: u64,
    pub variant: Variant,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub perception: PerceptionConfig,
    pub align: AlignConfig,
    pub eval: EvalOptions,
    pub mock_judge: MockJudge,
    pub remote_judge: RemoteJudgeConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.data.path.is_relative() && !cfg.data.path.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        Ok(cfg)
    }

    /// The configuration the trainers actually see: the top-level seed is
    /// copied into every stage and the variant's overrides are applied.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        cfg.perception.seed = cfg.seed;
        cfg.align.seed = cfg.seed;
        match cfg.variant {
            Variant::Full | Variant::WoUa => {}
            Variant::WoDp => {
                cfg.perception.mode = TrainingMode::SftPlain;
                cfg.eval.source = ConfidenceSource::LabelLikelihood;
            }
            Variant::WoDl => cfg.perception.mode = TrainingMode::SftStar,
            Variant::WoUrr => cfg.align.reward.reasoning_on = false,
            Variant::WoUcr => cfg.align.reward.calibration_on = false,
        }
        cfg
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.path.as_os_str().is_empty() {
            bail!("data.path is required");
        }
        self.model.policy_config().validate()?;
        self.perception.validate()?;
        if self.variant.has_alignment() {
            self.align.validate()?;
        }
        if self.run.workers == 0 || self.run.checkpoint_every == 0 {
            bail!("run.workers and run.checkpoint_every must be positive");
        }
        if self.eval.histogram_bins < 2 {
            bail!("eval.histogram_bins must be at least 2");
        }
        Ok(())
    }

    pub fn needs_remote_judge(&self) -> bool {
        self.variant.has_alignment()
            && self.align.needs_judge()
            && self.align.judge == JudgeChoice::Remote
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical JSON form.
    pub fn digest(&self) -> String {
        content_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.perception.tau, 0.5);
        assert_eq!(cfg.align.group_size, 8);
        assert_eq!(cfg.align.eps_adv, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[perception]\ntau = 0.5\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.data.path = "data/x.jsonl".into();
        cfg.perception.optimizer = dpua_core::policy::OptimizerKind::adam();
        cfg.perception.clip_norm = Some(5.0);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn variants_override_their_fields() {
        let base = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        let eff = |v: Variant| {
            RunConfig {
                variant: v,
                ..base.clone()
            }
            .effective()
        };
        assert_eq!(eff(Variant::WoDp).perception.mode, TrainingMode::SftPlain);
        assert_eq!(eff(Variant::WoDl).perception.mode, TrainingMode::SftStar);
        assert!(!eff(Variant::WoUrr).align.reward.reasoning_on);
        assert!(!eff(Variant::WoUcr).align.reward.calibration_on);
        assert_eq!(eff(Variant::Full).perception.mode, TrainingMode::Dpua);
        assert_eq!(eff(Variant::Full).align.seed, 9);
    }
}
