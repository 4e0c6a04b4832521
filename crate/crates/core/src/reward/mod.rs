//! Phase 2 rewards: judge-scored reasoning reward, calibration reward and
//! the accuracy reward used by the vanilla baseline.

mod judge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotatedSample, DisagreementDistribution, Label};
use crate::protocol::{model_distribution, ParseFailure, StructuredOutput};

pub use judge::{
    token_f1, Judge, JudgeCache, JudgeRequest, JudgeScores, MockJudge, RemoteJudge,
    RemoteJudgeConfig, Transport, UreqTransport, WireFormat, JUDGE_KEY_ENV, JUDGE_SYSTEM_PROMPT,
    JUDGE_URL_ENV,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("likert score {0} outside {{1, 2, 3}}")]
    LikertOutOfRange(i64),
    #[error("input out of range: {0}")]
    InputOutOfRange(String),
    #[error("invalid distribution: p_pos={p_pos}, p_neg={p_neg}")]
    InvalidDistribution { p_pos: f64, p_neg: f64 },
    #[error("reasoning reward enabled but no judge scores supplied")]
    MissingJudgeScores,
    #[error("judge reference text is empty")]
    EmptyReference,
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("malformed judge reply: {0}")]
    JudgeMalformedReply(String),
    #[error("both reward components are disabled")]
    NoRewardComponent,
}

/// Map a 1..=3 Likert score linearly onto [0, 1].
pub fn normalize_likert(likert: i64) -> Result<f64, RewardError> {
    if !(1..=3).contains(&likert) {
        return Err(RewardError::LikertOutOfRange(likert));
    }
    Ok((likert - 1) as f64 / 2.0)
}

fn in_unit(name: &str, x: f64) -> Result<(), RewardError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(RewardError::InputOutOfRange(format!("{name}={x}")))
    }
}

/// Agreement-weighted convex combination of the two judge scores:
/// `[(C - tau + eps) s_lab + (1 - C + eps) s_cue] / (1 - tau + 2 eps)`.
pub fn reasoning_reward(
    agreement: f64,
    s_lab: f64,
    s_cue: f64,
    tau: f64,
    eps: f64,
) -> Result<f64, RewardError> {
    if !(0.5..=1.0).contains(&agreement) {
        return Err(RewardError::InputOutOfRange(format!("agreement={agreement}")));
    }
    in_unit("s_lab", s_lab)?;
    in_unit("s_cue", s_cue)?;
    let w_lab = agreement - tau + eps;
    let w_cue = 1.0 - agreement + eps;
    Ok((w_lab * s_lab + w_cue * s_cue) / (1.0 - tau + 2.0 * eps))
}

fn check_dist(d: &DisagreementDistribution) -> Result<(), RewardError> {
    let ok = (0.0..=1.0).contains(&d.p_pos)
        && (0.0..=1.0).contains(&d.p_neg)
        && (d.p_pos + d.p_neg - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(RewardError::InvalidDistribution {
            p_pos: d.p_pos,
            p_neg: d.p_neg,
        })
    }
}

/// Half the L1 distance between the two class distributions.
pub fn calibration_mae(
    p_model: &DisagreementDistribution,
    p_human: &DisagreementDistribution,
) -> Result<f64, RewardError> {
    check_dist(p_model)?;
    check_dist(p_human)?;
    Ok(0.5 * ((p_model.p_pos - p_human.p_pos).abs() + (p_model.p_neg - p_human.p_neg).abs()))
}

pub fn calibration_reward(mae: f64) -> Result<f64, RewardError> {
    in_unit("mae", mae)?;
    Ok(1.0 - mae)
}

/// +1 for a correct label, -1 otherwise; unparsable outputs count as wrong.
pub fn accuracy_reward(prediction: Option<Label>, majority: Label) -> f64 {
    if prediction == Some(majority) {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub tau: f64,
    pub eps: f64,
    pub reasoning_on: bool,
    pub calibration_on: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            eps: 0.1,
            reasoning_on: true,
            calibration_on: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !self.reasoning_on && !self.calibration_on {
            return Err(RewardError::NoRewardComponent);
        }
        if self.eps.is_nan() || self.eps <= 0.0 || !(0.0..1.0).contains(&self.tau) {
            return Err(RewardError::InputOutOfRange(format!(
                "tau={}, eps={}",
                self.tau, self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_rat: f64,
    /// `None` when the output did not parse.
    pub mae: Option<f64>,
    pub r_cal: f64,
    pub r_total: f64,
    pub parse_valid: bool,
}

impl RewardBreakdown {
    pub fn invalid() -> Self {
        Self {
            r_rat: 0.0,
            mae: None,
            r_cal: 0.0,
            r_total: 0.0,
            parse_valid: false,
        }
    }
}

/// Combined reward for one rollout. Disabled components contribute 0;
/// unparsable outputs receive 0 overall.
pub fn total_reward(
    output: &Result<StructuredOutput, ParseFailure>,
    sample: &AnnotatedSample,
    judge: Option<&JudgeScores>,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let Ok(out) = output else {
        return Ok(RewardBreakdown::invalid());
    };
    let r_rat = if cfg.reasoning_on {
        let j = judge.ok_or(RewardError::MissingJudgeScores)?;
        reasoning_reward(sample.agreement, j.s_lab(), j.s_cue(), cfg.tau, cfg.eps)?
    } else {
        0.0
    };
    let p_model = model_distribution(out.prediction, out.confidence)
        .map_err(|e| RewardError::InputOutOfRange(e.to_string()))?;
    let mae = calibration_mae(&p_model, &sample.dist)?;
    let r_cal = if cfg.calibration_on {
        calibration_reward(mae)?
    } else {
        0.0
    };
    Ok(RewardBreakdown {
        r_rat,
        mae: Some(mae),
        r_cal,
        r_total: r_rat + r_cal,
        parse_valid: true,
    })
}
