use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dpua_core::grpo::{self, AlignError, AlignState, JudgeChoice, StepLog};
use dpua_core::perception::{
    self, evaluate_joint_loss, prepare_examples, EpochLog, LossSummary, PerceptionError,
    TrainingMode,
};
use dpua_core::pipeline::{build_vocabulary, dataset_digest};
use dpua_core::policy::{load_checkpoint, save_checkpoint, ReferencePolicy};
use dpua_core::reward::{Judge, JudgeRequest, RemoteJudge, RewardError};
use dpua_core::{AnnotatedSample, Split};

use super::read_dataset;
use crate::cli::{TrainDpArgs, TrainUaArgs};
use crate::config::RunConfig;
use crate::error::{input_error, CliError, CliResult, Failure, ResultExt};
use crate::run::{
    checkpoint_sha, run_id, unix_now, write_atomic, LineageEntry, RunDir, RunManifest, Stage,
};

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(path).input()?.effective();
    cfg.validate()
        .with_context(|| format!("invalid config {}", path.display()))
        .input()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> CliResult<Vec<AnnotatedSample>> {
    read_dataset(&cfg.data.path, Some(cfg.data.task), cfg.data.lenient).input()
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn perception_failure(e: PerceptionError) -> CliError {
    let failure = match e {
        PerceptionError::InvalidConfig(_)
        | PerceptionError::NoTrainingData
        | PerceptionError::AgreementOutOfRange(_) => Failure::Input,
        _ => Failure::Training,
    };
    CliError {
        failure,
        error: anyhow::Error::new(e).context("phase-1 training failed"),
    }
}

fn align_failure(e: AlignError) -> CliError {
    let failure = match &e {
        AlignError::Reward(RewardError::JudgeUnavailable(_))
        | AlignError::Reward(RewardError::JudgeMalformedReply(_)) => Failure::External,
        AlignError::InvalidConfig(_)
        | AlignError::GroupTooSmall(_)
        | AlignError::NoTrainingData
        | AlignError::MissingJudge
        | AlignError::Reward(RewardError::NoRewardComponent)
        | AlignError::Reward(RewardError::EmptyReference)
        | AlignError::Reward(RewardError::InputOutOfRange(_)) => Failure::Input,
        _ => Failure::Training,
    };
    CliError {
        failure,
        error: anyhow::Error::new(e).context("alignment failed"),
    }
}

/// Initial and final full-pass losses of a Phase-1 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSummary {
    pub mode: TrainingMode,
    pub train_samples: usize,
    pub initial: LossSummary,
    pub final_loss: LossSummary,
    pub epochs: Vec<EpochLog>,
}

fn print_epoch(log: &EpochLog, total: usize) {
    if log.mode == TrainingMode::SftPlain {
        println!("epoch {}/{}  label loss {:.4}", log.epoch, total, log.l_label);
    } else {
        println!(
            "epoch {}/{}  joint {:.4}  label {:.4}  rationale {:.4}  confidence {:.4}",
            log.epoch, total, log.loss, log.l_label, log.l_rat, log.l_conf
        );
    }
}

pub fn train_dp(args: &TrainDpArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let samples = load_data(&cfg)?;
    let digest = dataset_digest(&samples);
    let run = RunDir::open(&args.run_dir).input()?;
    if run.has_manifest() {
        return Err(input_error(format!(
            "{} already holds a run; Phase 1 needs a fresh run directory",
            args.run_dir.display()
        )));
    }

    let vocab = build_vocabulary(&[&samples], cfg.model.vocab_size);
    let mut policy =
        ReferencePolicy::new(cfg.model.policy_config(), vocab, cfg.seed).input()?;
    let now = unix_now();
    let mut manifest = RunManifest {
        run_id: run_id(&cfg, &digest),
        seed: cfg.seed,
        variant: cfg.variant,
        dataset_path: cfg.data.path.clone(),
        dataset_digest: digest,
        config: cfg.clone(),
        ua_config: None,
        lineage: Vec::new(),
        ua_skipped: false,
        created_unix: now,
        updated_unix: now,
    };
    run.write_config_snapshot(Stage::Dp, &cfg).input()?;
    run.commit_checkpoint(&mut manifest, Stage::Base, None, &policy, &cfg)
        .input()?;

    let train: Vec<AnnotatedSample> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .cloned()
        .collect();
    let examples =
        prepare_examples(&train, policy.vocab(), cfg.perception.mode).map_err(perception_failure)?;
    if examples.is_empty() {
        return Err(perception_failure(PerceptionError::NoTrainingData));
    }
    let initial =
        evaluate_joint_loss(&policy, &examples, &cfg.perception).map_err(perception_failure)?;
    println!(
        "run {}: {} train samples, {} parameters, mode {:?}, initial loss {:.4}",
        manifest.run_id,
        examples.len(),
        policy.params().len(),
        cfg.perception.mode,
        initial.joint
    );

    let log_path = run.logs_dir().input()?.join("dp.jsonl");
    let mut log_error = None;
    let epochs = perception::train_dp(&mut policy, &samples, &cfg.perception, |log| {
        print_epoch(log, cfg.perception.epochs);
        if let Err(e) = append_line(&log_path, log) {
            log_error.get_or_insert(e);
        }
    })
    .map_err(perception_failure)?;
    if let Some(e) = log_error {
        return Err(e).context("writing training log").input();
    }

    let final_loss =
        evaluate_joint_loss(&policy, &examples, &cfg.perception).map_err(perception_failure)?;
    let summary = DpSummary {
        mode: cfg.perception.mode,
        train_samples: examples.len(),
        initial,
        final_loss,
        epochs,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&run.logs_dir().input()?.join("dp_summary.json"), json.as_bytes()).input()?;
    run.commit_checkpoint(&mut manifest, Stage::Dp, Some(Stage::Base), &policy, &cfg)
        .input()?;
    println!(
        "final loss {:.4} ({:.1}% of initial); checkpoint {}",
        final_loss.joint,
        100.0 * final_loss.joint / initial.joint,
        run.checkpoint_dir(Stage::Dp).display()
    );
    Ok(())
}

const PROGRESS_DIR: &str = "progress";
const STOP: &str = "stop requested";

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    run_config_digest: String,
    state: AlignState,
}

fn step_dir_name(step: usize) -> String {
    format!("step-{step:06}")
}

/// Most recent complete progress snapshot, if any.
fn latest_progress(root: &Path) -> anyhow::Result<Option<PathBuf>> {
    let dir = root.join(PROGRESS_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut steps: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step-"))
                && p.join("progress.json").exists()
        })
        .collect();
    steps.sort();
    Ok(steps.pop())
}

fn save_progress(
    root: &Path,
    policy: &ReferencePolicy,
    state: &AlignState,
    digest: &str,
) -> anyhow::Result<()> {
    let dir = root.join(PROGRESS_DIR);
    fs::create_dir_all(&dir)?;
    let target = dir.join(step_dir_name(state.completed_steps));
    if target.exists() {
        return Ok(());
    }
    let tmp = dir.join(format!(".partial-{}", state.completed_steps));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    save_checkpoint(policy, &tmp.join("policy"))?;
    let progress = Progress {
        run_config_digest: digest.to_string(),
        state: state.clone(),
    };
    fs::write(tmp.join("progress.json"), serde_json::to_string(&progress)?)?;
    fs::rename(&tmp, &target)?;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if path != target {
            fs::remove_dir_all(&path)?;
        }
    }
    Ok(())
}

/// Keep only log lines for steps that the resumed state has completed.
fn trim_log(path: &Path, completed: usize) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let log: StepLog = serde_json::from_str(line)
            .with_context(|| format!("corrupt log line in {}", path.display()))?;
        if log.step <= completed {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn build_judge(
    cfg: &RunConfig,
    run: &RunDir,
    samples: &[AnnotatedSample],
) -> CliResult<Option<Box<dyn Judge>>> {
    if !cfg.align.needs_judge() {
        return Ok(None);
    }
    match cfg.align.judge {
        JudgeChoice::Mock => Ok(Some(Box::new(cfg.mock_judge))),
        JudgeChoice::Remote => {
            let mut rc = cfg.remote_judge.clone().with_env();
            if rc.url.is_empty() {
                return Err(input_error(
                    "remote judge selected but no endpoint configured (remote_judge.url or DPUA_JUDGE_URL)",
                ));
            }
            if rc.cache_path.is_none() {
                rc.cache_path = Some(run.path("judge_cache.jsonl"));
            }
            let judge = RemoteJudge::new(rc).external()?;
            // fail before training when the endpoint is down, not at the
            // first step that happens to produce a parseable rationale
            if let Some((s, pair)) = samples.iter().find_map(|s| s.ref_rationale.as_ref().map(|r| (s, r))) {
                let probe = JudgeRequest {
                    task: s.task.name().to_string(),
                    generated_rationale: format!("{} {}", pair.label_justification, pair.disagreement_cue),
                    reference_label_justification: pair.label_justification.clone(),
                    reference_disagreement_cue: pair.disagreement_cue.clone(),
                };
                judge
                    .score(&probe)
                    .context("remote judge did not answer the startup probe")
                    .external()?;
            }
            Ok(Some(Box::new(judge)))
        }
    }
}

/// Attach the starting checkpoint to the run, creating the manifest when the
/// run directory is new.
fn starting_point(
    run: &RunDir,
    args: &TrainUaArgs,
    cfg: &RunConfig,
    digest: &str,
) -> CliResult<(RunManifest, ReferencePolicy)> {
    if run.has_manifest() {
        let manifest = run.load_manifest().input()?;
        if manifest.dataset_digest != digest {
            return Err(input_error(format!(
                "dataset {} differs from the one this run was trained on",
                cfg.data.path.display()
            )));
        }
        if manifest.entry(Stage::Ua).is_some() {
            return Err(input_error(format!(
                "{} already has a ua checkpoint; use a new run directory",
                run.root().display()
            )));
        }
        if let Some(ckpt) = &args.checkpoint {
            let sha = checkpoint_sha(ckpt).input()?;
            let recorded = manifest.entry(Stage::Dp).map(|e| e.params_sha256.as_str());
            if recorded != Some(sha.as_str()) {
                return Err(input_error(format!(
                    "--checkpoint {} is not this run's dp checkpoint",
                    ckpt.display()
                )));
            }
        }
        let policy = manifest.load_stage(run.root(), Stage::Dp).input()?;
        return Ok((manifest, policy));
    }

    let Some(ckpt) = &args.checkpoint else {
        return Err(input_error(format!(
            "{} has no run; pass --checkpoint with a Phase-1 checkpoint",
            run.root().display()
        )));
    };
    let policy = load_checkpoint(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))
        .input()?;
    let abs = fs::canonicalize(ckpt).input()?;
    let saved = dpua_core::policy::config_hash(policy.config(), policy.vocab());
    let now = unix_now();
    let mut manifest = RunManifest {
        run_id: run_id(cfg, digest),
        seed: cfg.seed,
        variant: cfg.variant,
        dataset_path: cfg.data.path.clone(),
        dataset_digest: digest.to_string(),
        config: cfg.clone(),
        ua_config: None,
        lineage: vec![LineageEntry {
            stage: Stage::Dp,
            checkpoint: abs,
            parent: None,
            params_sha256: checkpoint_sha(ckpt).input()?,
            config_hash: saved,
            run_config_digest: String::new(),
            created_unix: now,
        }],
        ua_skipped: false,
        created_unix: now,
        updated_unix: now,
    };
    run.save_manifest(&mut manifest).input()?;
    Ok((manifest, policy))
}

pub fn train_ua(args: &TrainUaArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let run = RunDir::open(&args.run_dir).input()?;
    if !cfg.variant.has_alignment() {
        if run.has_manifest() {
            let mut manifest = run.load_manifest().input()?;
            manifest.ua_skipped = true;
            run.save_manifest(&mut manifest).input()?;
        }
        println!(
            "variant {} has no alignment phase; the dp checkpoint is final",
            cfg.variant.name()
        );
        return Ok(());
    }
    let samples = load_data(&cfg)?;
    let digest = dataset_digest(&samples);
    let (mut manifest, start) = starting_point(&run, args, &cfg, &digest)?;

    let cfg_digest = cfg.digest();
    let snapshot = run.path("config.ua.toml");
    if !snapshot.exists() {
        run.write_config_snapshot(Stage::Ua, &cfg).input()?;
    }

    let (mut policy, mut state) = match latest_progress(run.root()).input()? {
        Some(dir) => {
            let text = fs::read_to_string(dir.join("progress.json")).input()?;
            let progress: Progress = serde_json::from_str(&text).input()?;
            if progress.run_config_digest != cfg_digest {
                return Err(input_error(
                    "config differs from the interrupted alignment run; resume with the same config",
                ));
            }
            let policy = load_checkpoint(&dir.join("policy")).input()?;
            println!("resuming alignment at step {}", progress.state.completed_steps);
            (policy, progress.state)
        }
        None => (start.clone(), AlignState::new(&cfg.align)),
    };

    let judge = build_judge(&cfg, &run, &samples)?;
    let log_path = run.logs_dir().input()?.join("ua.jsonl");
    trim_log(&log_path, state.completed_steps).input()?;

    let started_at = state.completed_steps;
    let every = cfg.run.checkpoint_every;
    let stop_at = args.stop_after.map(|n| started_at + n);
    let result = grpo::train_ua(
        &mut policy,
        Some(&start),
        &samples,
        &cfg.align,
        judge.as_deref(),
        &mut state,
        |log, p, st| {
            println!(
                "step {}  reward {:.4}  r_cal {:.4}  r_rat {:.4}  mae {}  valid {:.2}",
                log.step,
                log.mean_reward,
                log.mean_r_cal,
                log.mean_r_rat,
                log.mean_mae.map(|m| format!("{m:.4}")).unwrap_or_else(|| "n/a".into()),
                log.parse_valid_rate
            );
            append_line(&log_path, log).map_err(|e| e.to_string())?;
            let stopping = stop_at.is_some_and(|s| st.completed_steps >= s);
            if st.completed_steps % every == 0 || stopping {
                save_progress(run.root(), p, st, &cfg_digest).map_err(|e| e.to_string())?;
            }
            if stopping {
                return Err(STOP.to_string());
            }
            Ok(())
        },
    );
    match result {
        Ok(_) => {}
        Err(AlignError::Callback(msg)) if msg == STOP => {
            println!(
                "stopped after step {}; rerun the same command to resume",
                state.completed_steps
            );
            return Ok(());
        }
        Err(e) => return Err(align_failure(e)),
    }

    manifest.ua_config = Some(cfg.clone());
    run.commit_checkpoint(&mut manifest, Stage::Ua, Some(Stage::Dp), &policy, &cfg)
        .input()?;
    let progress = run.path(PROGRESS_DIR);
    if progress.exists() {
        fs::remove_dir_all(&progress).input()?;
    }
    println!(
        "alignment finished after {} steps; checkpoint {}",
        state.completed_steps,
        run.checkpoint_dir(Stage::Ua).display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_failures_map_to_external() {
        let e = align_failure(AlignError::Reward(RewardError::JudgeUnavailable("x".into())));
        assert_eq!(e.failure, Failure::External);
        let e = align_failure(AlignError::Reward(RewardError::NoRewardComponent));
        assert_eq!(e.failure, Failure::Input);
        let e = align_failure(AlignError::NonFiniteReward(f64::NAN));
        assert_eq!(e.failure, Failure::Training);
    }

    #[test]
    fn progress_dirs_sort_by_step() {
        assert!(step_dir_name(9) < step_dir_name(10));
        assert!(step_dir_name(99) < step_dir_name(100));
    }
}
