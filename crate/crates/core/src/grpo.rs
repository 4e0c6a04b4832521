//! Phase 2: uncertainty alignment with group-relative policy optimization.
//!
//! For every prompt the policy samples a group of completions, each is parsed
//! and rewarded, rewards are standardized within the group, and the policy
//! takes a step on the advantage-weighted sequence log-likelihood.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotatedSample, Split};
use crate::policy::{
    Gradient, Optimizer, OptimizerKind, Policy, PolicyError, SampledCompletion, TokenId,
    WeightedTarget,
};
use crate::protocol::{parse_output_with_cap, render_prompt, DEFAULT_RATIONALE_CAP};
use crate::reward::{
    accuracy_reward, total_reward, Judge, JudgeRequest, RewardBreakdown, RewardConfig,
    RewardError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no training samples")]
    NoTrainingData,
    #[error("reasoning reward needs a judge")]
    MissingJudge,
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Callback(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    Population,
    Sample,
}

/// What the rollouts are rewarded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Reasoning reward plus calibration reward.
    Uncertainty,
    /// +1 / -1 for the majority label only.
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeChoice {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub group_size: usize,
    pub eps_adv: f64,
    pub std_kind: StdKind,
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Prompts per gradient step.
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub rationale_cap: usize,
    pub reward_mode: RewardMode,
    pub reward: RewardConfig,
    pub judge: JudgeChoice,
    /// Weight of a per-token KL penalty towards the starting policy; 0 = off.
    pub kl_coef: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    /// Stop after this many steps in total (0 = run all epochs).
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_adv: 0.1,
            std_kind: StdKind::Population,
            temperature: 1.0,
            epochs: 1,
            learning_rate: 1e-6,
            batch_size: 4,
            max_new_tokens: 128,
            rationale_cap: DEFAULT_RATIONALE_CAP,
            reward_mode: RewardMode::Uncertainty,
            reward: RewardConfig::default(),
            judge: JudgeChoice::Mock,
            kl_coef: 0.0,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            max_steps: 0,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: String| Err(AlignError::InvalidConfig(m));
        if self.group_size < 2 {
            return Err(AlignError::GroupTooSmall(self.group_size));
        }
        if !(self.eps_adv > 0.0 && self.eps_adv.is_finite()) {
            return bad(format!("eps_adv must be positive, got {}", self.eps_adv));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_new_tokens == 0 {
            return bad("epochs, batch_size and max_new_tokens must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad(format!("kl_coef must be non-negative, got {}", self.kl_coef));
        }
        if self.reward_mode == RewardMode::Uncertainty {
            self.reward.validate()?;
        }
        Ok(())
    }

    pub fn needs_judge(&self) -> bool {
        self.reward_mode == RewardMode::Uncertainty && self.reward.reasoning_on
    }
}

/// Standardize rewards within a group with the population standard
/// deviation: `(R - mean) / (std + eps_adv)`.
pub fn group_advantages(rewards: &[f64], eps_adv: f64) -> Result<Vec<f64>, AlignError> {
    group_advantages_with(rewards, eps_adv, StdKind::Population)
}

pub fn group_advantages_with(
    rewards: &[f64],
    eps_adv: f64,
    std_kind: StdKind,
) -> Result<Vec<f64>, AlignError> {
    let g = rewards.len();
    if g < 2 {
        return Err(AlignError::GroupTooSmall(g));
    }
    if let Some(&r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(AlignError::NonFiniteReward(r));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        // exact zeros; the rounded mean could leave tiny residuals
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match std_kind {
        StdKind::Population => g as f64,
        StdKind::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps_adv)).collect())
}

/// One prompt's rollouts with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub sample_id: String,
    pub prompt: Vec<TokenId>,
    pub completions: Vec<SampledCompletion>,
    pub rewards: Vec<RewardBreakdown>,
    /// Scalar reward each advantage was computed from.
    pub scalar_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

fn group_weights(group: &GroupRecord, scale: f64) -> Vec<Vec<f64>> {
    group
        .completions
        .iter()
        .zip(&group.advantages)
        .map(|(c, a)| vec![a * scale; c.tokens.len()])
        .collect()
}

/// `-(1/N) sum_i (1/G) sum_g A_ig sum_t log pi(o_igt)` under `policy`.
pub fn grpo_loss<P: Policy>(policy: &P, groups: &[GroupRecord]) -> Result<f64, AlignError> {
    let n = groups.len() as f64;
    let mut loss = 0.0;
    for grp in groups {
        let g = grp.completions.len() as f64;
        for (c, a) in grp.completions.iter().zip(&grp.advantages) {
            let lp: f64 = policy.token_logprobs(&grp.prompt, &c.tokens)?.iter().sum();
            loss -= a * lp / (n * g);
        }
    }
    Ok(loss)
}

/// Gradient of [`grpo_loss`] (plus an optional KL penalty towards
/// `reference`) added into `grad`. Groups whose advantages are all zero are
/// skipped: they contribute nothing.
pub fn grpo_loss_gradient<P: Policy>(
    policy: &P,
    reference: Option<(&P, f64)>,
    groups: &[GroupRecord],
    grad: &mut Gradient,
) -> Result<f64, AlignError> {
    let n = groups.len() as f64;
    let mut loss = 0.0;
    for grp in groups {
        let kl_active = matches!(reference, Some((_, beta)) if beta > 0.0);
        if !kl_active && grp.advantages.iter().all(|&a| a == 0.0) {
            continue;
        }
        let scale = 1.0 / (n * grp.completions.len() as f64);
        let mut weights = group_weights(grp, scale);
        let mut kl_loss = None;
        if let Some((ref_policy, beta)) = reference.filter(|(_, b)| *b > 0.0) {
            // k3 estimator: d/dtheta [r - ln r - 1] = (1 - r) dlogp, r = p_ref / p
            let mut value = 0.0;
            for ((c, w), a) in grp.completions.iter().zip(weights.iter_mut()).zip(&grp.advantages) {
                let lp = policy.token_logprobs(&grp.prompt, &c.tokens)?;
                let lr = ref_policy.token_logprobs(&grp.prompt, &c.tokens)?;
                for ((wt, p), q) in w.iter_mut().zip(&lp).zip(&lr) {
                    let r = (q - p).exp();
                    *wt += beta * scale * (r - 1.0);
                    value += beta * scale * (r - (q - p) - 1.0) - a * scale * p;
                }
            }
            kl_loss = Some(value);
        }
        let targets: Vec<WeightedTarget<'_>> = grp
            .completions
            .iter()
            .zip(&weights)
            .map(|(c, w)| WeightedTarget {
                tokens: &c.tokens,
                weights: w,
            })
            .collect();
        let objective = policy.objective_gradient(&grp.prompt, &targets, grad)?;
        loss += kl_loss.unwrap_or(objective);
    }
    Ok(loss)
}

/// Resumable progress marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignState {
    pub completed_steps: usize,
    pub optimizer: Optimizer,
}

impl AlignState {
    pub fn new(cfg: &AlignConfig) -> Self {
        Self {
            completed_steps: 0,
            optimizer: Optimizer::new(cfg.optimizer, cfg.clip_norm),
        }
    }
}

/// One line of the alignment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub mean_r_rat: f64,
    pub mean_r_cal: f64,
    pub mean_reward: f64,
    /// Mean calibration MAE over parse-valid rollouts (`None` if there were none).
    pub mean_mae: Option<f64>,
    pub parse_valid_rate: f64,
    pub mean_abs_advantage: f64,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample, parse and reward one group.
pub fn rollout_group<P: Policy>(
    policy: &P,
    sample: &AnnotatedSample,
    cfg: &AlignConfig,
    judge: Option<&dyn Judge>,
    seed: u64,
) -> Result<GroupRecord, AlignError> {
    let prompt = policy.vocabulary().encode_prompt(&render_prompt(sample).text);
    let completions = policy.sample_group(
        &prompt,
        cfg.group_size,
        cfg.temperature,
        seed,
        cfg.max_new_tokens,
    )?;
    let parsed: Vec<_> = completions
        .iter()
        .map(|c| parse_output_with_cap(&c.text, sample.task, cfg.rationale_cap))
        .collect();

    let (rewards, scalar): (Vec<RewardBreakdown>, Vec<f64>) = match cfg.reward_mode {
        RewardMode::Accuracy => parsed
            .iter()
            .map(|p| {
                let pred = p.as_ref().ok().map(|o| o.prediction);
                let r = accuracy_reward(pred, sample.majority_label);
                let b = RewardBreakdown {
                    r_rat: 0.0,
                    mae: None,
                    r_cal: 0.0,
                    r_total: r,
                    parse_valid: p.is_ok(),
                };
                (b, r)
            })
            .unzip(),
        RewardMode::Uncertainty => {
            let mut scores = vec![None; parsed.len()];
            if cfg.reward.reasoning_on {
                let judge = judge.ok_or(AlignError::MissingJudge)?;
                let refs = sample.ref_rationale.as_ref().ok_or_else(|| {
                    RewardError::InputOutOfRange(format!("sample {} has no reference rationale", sample.id))
                })?;
                let valid: Vec<usize> = (0..parsed.len()).filter(|&i| parsed[i].is_ok()).collect();
                let requests: Vec<JudgeRequest> = valid
                    .iter()
                    .map(|&i| JudgeRequest {
                        task: sample.task.definition().to_string(),
                        generated_rationale: parsed[i].as_ref().unwrap().rationale.clone(),
                        reference_label_justification: refs.label_justification.clone(),
                        reference_disagreement_cue: refs.disagreement_cue.clone(),
                    })
                    .collect();
                for (i, r) in valid.into_iter().zip(judge.score_batch(&requests)) {
                    scores[i] = Some(r?);
                }
            }
            let mut out = Vec::with_capacity(parsed.len());
            for (p, s) in parsed.iter().zip(&scores) {
                let b = total_reward(p, sample, s.as_ref(), &cfg.reward)?;
                out.push((b, b.r_total));
            }
            out.into_iter().unzip()
        }
    };
    let advantages = group_advantages_with(&scalar, cfg.eps_adv, cfg.std_kind)?;
    Ok(GroupRecord {
        sample_id: sample.id.clone(),
        prompt,
        completions,
        rewards,
        scalar_rewards: scalar,
        advantages,
    })
}

fn step_log(step: usize, epoch: usize, groups: &[GroupRecord]) -> StepLog {
    let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let n = all.len().max(1) as f64;
    let maes: Vec<f64> = all.iter().filter_map(|r| r.mae).collect();
    let adv: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let scalar: f64 = groups.iter().flat_map(|g| &g.scalar_rewards).sum();
    StepLog {
        step,
        epoch,
        mean_r_rat: all.iter().map(|r| r.r_rat).sum::<f64>() / n,
        mean_r_cal: all.iter().map(|r| r.r_cal).sum::<f64>() / n,
        mean_reward: scalar / n,
        mean_mae: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
        parse_valid_rate: all.iter().filter(|r| r.parse_valid).count() as f64 / n,
        mean_abs_advantage: adv.iter().map(|a| a.abs()).sum::<f64>() / adv.len().max(1) as f64,
    }
}

/// Run alignment from `state` onwards. Prompt order and sampling seeds are
/// functions of `(cfg.seed, epoch, step)`, so a run resumed from a saved
/// state and checkpoint continues exactly where it stopped. `anchor` is the
/// policy the KL penalty pulls towards; it defaults to `policy` as passed in,
/// so a resumed run should hand in the original starting policy. `on_step`
/// runs after every update; an error from it stops training.
pub fn train_ua<P: Policy + Clone>(
    policy: &mut P,
    anchor: Option<&P>,
    samples: &[AnnotatedSample],
    cfg: &AlignConfig,
    judge: Option<&dyn Judge>,
    state: &mut AlignState,
    mut on_step: impl FnMut(&StepLog, &P, &AlignState) -> Result<(), String>,
) -> Result<Vec<StepLog>, AlignError> {
    cfg.validate()?;
    if cfg.needs_judge() && judge.is_none() {
        return Err(AlignError::MissingJudge);
    }
    let train: Vec<&AnnotatedSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(AlignError::NoTrainingData);
    }
    let reference = (cfg.kl_coef > 0.0).then(|| anchor.cloned().unwrap_or_else(|| policy.clone()));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total = steps_per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let mut logs = Vec::new();
    while state.completed_steps < total {
        let step = state.completed_steps;
        let epoch = step / steps_per_epoch;
        let within = step % steps_per_epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0)));
        let start = within * cfg.batch_size;
        let end = (start + cfg.batch_size).min(order.len());

        let mut groups = Vec::with_capacity(end - start);
        for (k, &idx) in order[start..end].iter().enumerate() {
            let seed = mix_seed(cfg.seed, step as u64 + 1, k as u64 + 1);
            groups.push(rollout_group(&*policy, train[idx], cfg, judge, seed)?);
        }

        let mut grad = Gradient::zeros(policy.num_params());
        grpo_loss_gradient(
            &*policy,
            reference.as_ref().map(|r| (r, cfg.kl_coef)),
            &groups,
            &mut grad,
        )?;
        policy.apply_update(&grad, cfg.learning_rate, &mut state.optimizer)?;
        state.completed_steps += 1;

        let log = step_log(state.completed_steps, epoch + 1, &groups);
        on_step(&log, policy, state).map_err(AlignError::Callback)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn advantage_examples() {
        assert!(close(
            &group_advantages(&[2.0, 0.0], 0.1).unwrap(),
            &[0.909091, -0.909091]
        ));
        let a = 1.0 / ((2.0f64 / 3.0).sqrt() + 0.1);
        assert!(close(
            &group_advantages(&[1.0, 2.0, 3.0], 0.1).unwrap(),
            &[-a, 0.0, a]
        ));
        assert!((a - 1.091112).abs() < 1e-6);
        assert_eq!(group_advantages(&[0.7; 5], 0.1).unwrap(), vec![0.0; 5]);
        assert_eq!(group_advantages(&[1.0], 0.1), Err(AlignError::GroupTooSmall(1)));
        assert!(matches!(
            group_advantages(&[1.0, f64::NAN], 0.1),
            Err(AlignError::NonFiniteReward(_))
        ));
        let sample = group_advantages_with(&[2.0, 0.0], 0.1, StdKind::Sample).unwrap();
        let s = 2f64.sqrt();
        assert!(close(&sample, &[1.0 / (s + 0.1), -1.0 / (s + 0.1)]));
    }

    #[test]
    fn config_rejects_no_reward() {
        let mut cfg = AlignConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.reward.reasoning_on = false;
        cfg.reward.calibration_on = false;
        assert_eq!(
            cfg.validate(),
            Err(AlignError::Reward(RewardError::NoRewardComponent))
        );
        cfg.reward_mode = RewardMode::Accuracy;
        assert!(cfg.validate().is_ok());
        cfg.group_size = 1;
        assert_eq!(cfg.validate(), Err(AlignError::GroupTooSmall(1)));
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(mix_seed(1, 1, 1), mix_seed(1, 1, 2));
        assert_ne!(mix_seed(1, 2, 1), mix_seed(1, 1, 2));
    }
}
