//! Phase 1: disagreement perception.
//!
//! Each target is split into label, rationale and confidence segments. The
//! per-segment mean negative log-likelihoods are combined with weights that
//! depend on the sample's agreement score: clear-cut samples lean on label
//! supervision, contested ones on the rationale.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotatedSample, Split};
use crate::policy::{
    label_segments, segment_spans, Gradient, Optimizer, OptimizerKind, Policy, PolicyError,
    SegmentSpans, TokenId, Vocabulary, WeightedTarget,
};
use crate::protocol::{render_prompt, serialize_label_target, serialize_target, ProtocolError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("segment span is empty")]
    EmptySpan,
    #[error("index {index} outside a sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("agreement {0} outside [0.5, 1]")]
    AgreementOutOfRange(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid perception config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no training samples")]
    NoTrainingData,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Which supervision the trainer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Full target, agreement-dependent segment weights.
    Dpua,
    /// Full target, all segment weights 1.
    SftStar,
    /// Label-only target, standard likelihood.
    SftPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub tau: f64,
    pub alpha: f64,
    pub eps: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: TrainingMode,
    pub reduction: Reduction,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            alpha: 0.1,
            eps: 0.1,
            epochs: 3,
            learning_rate: 1e-4,
            batch_size: 8,
            mode: TrainingMode::Dpua,
            reduction: Reduction::Sum,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: &str| Err(PerceptionError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive");
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// Segment weights this configuration applies to a sample.
    pub fn segment_weights(&self, agreement: f64) -> Result<SegmentWeights, PerceptionError> {
        match self.mode {
            TrainingMode::Dpua => adaptive_weights(agreement, self),
            TrainingMode::SftStar => {
                check_agreement(agreement)?;
                Ok(SegmentWeights {
                    label: 1.0,
                    rat: 1.0,
                    conf: 1.0,
                })
            }
            TrainingMode::SftPlain => {
                check_agreement(agreement)?;
                Ok(SegmentWeights {
                    label: 1.0,
                    rat: 0.0,
                    conf: 0.0,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLosses {
    pub l_label: f64,
    pub l_rat: f64,
    pub l_conf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentWeights {
    pub label: f64,
    pub rat: f64,
    pub conf: f64,
}

fn check_agreement(agreement: f64) -> Result<(), PerceptionError> {
    if (0.5 - 1e-12..=1.0 + 1e-12).contains(&agreement) {
        Ok(())
    } else {
        Err(PerceptionError::AgreementOutOfRange(agreement))
    }
}

/// Mean negative log-probability over `span`.
pub fn segment_loss(
    logprobs: &[f64],
    span: std::ops::Range<usize>,
) -> Result<f64, PerceptionError> {
    if span.is_empty() {
        return Err(PerceptionError::EmptySpan);
    }
    if span.end > logprobs.len() {
        return Err(PerceptionError::IndexOutOfRange {
            index: span.end - 1,
            len: logprobs.len(),
        });
    }
    let n = span.len() as f64;
    Ok(-logprobs[span].iter().sum::<f64>() / n)
}

/// Hard-label baseline loss: the label segment alone.
pub fn standard_label_loss(
    logprobs: &[f64],
    label_span: std::ops::Range<usize>,
) -> Result<f64, PerceptionError> {
    segment_loss(logprobs, label_span)
}

/// Label weight `C - tau + eps`, rationale weight `alpha (1 - C + eps)`,
/// confidence weight 1.
pub fn adaptive_weights(
    agreement: f64,
    cfg: &PerceptionConfig,
) -> Result<SegmentWeights, PerceptionError> {
    check_agreement(agreement)?;
    Ok(SegmentWeights {
        label: agreement - cfg.tau + cfg.eps,
        rat: cfg.alpha * (1.0 - agreement + cfg.eps),
        conf: 1.0,
    })
}

/// Weighted sum (or mean, per `cfg.reduction`) of segment losses over a batch.
pub fn joint_loss(
    batch: &[(SegmentLosses, f64)],
    cfg: &PerceptionConfig,
) -> Result<f64, PerceptionError> {
    if batch.is_empty() {
        return Err(PerceptionError::EmptyBatch);
    }
    let mut total = 0.0;
    for (l, agreement) in batch {
        let w = cfg.segment_weights(*agreement)?;
        total += w.label * l.l_label + w.rat * l.l_rat + w.conf * l.l_conf;
    }
    Ok(match cfg.reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / batch.len() as f64,
    })
}

/// A sample tokenized for supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub spans: SegmentSpans,
    pub agreement: f64,
}

impl TrainingExample {
    pub fn segment_losses(&self, logprobs: &[f64]) -> Result<SegmentLosses, PerceptionError> {
        let or_zero = |span: std::ops::Range<usize>| {
            if span.is_empty() {
                Ok(0.0)
            } else {
                segment_loss(logprobs, span)
            }
        };
        Ok(SegmentLosses {
            l_label: segment_loss(logprobs, self.spans.label.clone())?,
            l_rat: or_zero(self.spans.rationale.clone())?,
            l_conf: or_zero(self.spans.confidence.clone())?,
        })
    }

    /// Per-token loss weights: segment weight divided by segment length.
    pub fn token_weights(&self, w: SegmentWeights, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.target.len()];
        for (span, weight) in [
            (&self.spans.label, w.label),
            (&self.spans.rationale, w.rat),
            (&self.spans.confidence, w.conf),
        ] {
            if span.is_empty() {
                continue;
            }
            let per = scale * weight / span.len() as f64;
            out[span.clone()].iter_mut().for_each(|x| *x = per);
        }
        out
    }
}

/// Tokenize the targets `mode` trains on. Tie samples get the smallest
/// expressible confidence literal.
pub fn prepare_examples(
    samples: &[AnnotatedSample],
    vocab: &Vocabulary,
    mode: TrainingMode,
) -> Result<Vec<TrainingExample>, PerceptionError> {
    samples
        .iter()
        .map(|s| {
            let prompt = vocab.encode_prompt(&render_prompt(s).text);
            let (target, spans) = match mode {
                TrainingMode::SftPlain => {
                    let target = vocab.encode_target(&serialize_label_target(s));
                    let spans = label_segments(&target);
                    (target, spans)
                }
                TrainingMode::Dpua | TrainingMode::SftStar => {
                    let target = vocab.encode_target(&serialize_target(s, s.agreement)?);
                    let spans = segment_spans(&target, vocab)?;
                    (target, spans)
                }
            };
            Ok(TrainingExample {
                id: s.id.clone(),
                prompt,
                target,
                spans,
                agreement: s.agreement,
            })
        })
        .collect()
}

/// Joint loss of `batch` under `policy`, with its gradient added to `grad`.
pub fn joint_loss_gradient<P: Policy>(
    policy: &P,
    batch: &[TrainingExample],
    cfg: &PerceptionConfig,
    grad: &mut Gradient,
) -> Result<f64, PerceptionError> {
    if batch.is_empty() {
        return Err(PerceptionError::EmptyBatch);
    }
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.len() as f64,
    };
    let mut total = 0.0;
    for ex in batch {
        let weights = ex.token_weights(cfg.segment_weights(ex.agreement)?, scale);
        total += policy.objective_gradient(
            &ex.prompt,
            &[WeightedTarget {
                tokens: &ex.target,
                weights: &weights,
            }],
            grad,
        )?;
    }
    Ok(total)
}

/// Joint loss of `batch` under `policy`, evaluated through segment losses.
pub fn batch_joint_loss<P: Policy>(
    policy: &P,
    batch: &[TrainingExample],
    cfg: &PerceptionConfig,
) -> Result<f64, PerceptionError> {
    let mut items = Vec::with_capacity(batch.len());
    for ex in batch {
        let lp = policy.token_logprobs(&ex.prompt, &ex.target)?;
        items.push((ex.segment_losses(&lp)?, ex.agreement));
    }
    joint_loss(&items, cfg)
}

/// Dataset-level summary: per-sample mean joint loss and segment means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub joint: f64,
    pub l_label: f64,
    pub l_rat: f64,
    pub l_conf: f64,
}

pub fn evaluate_joint_loss<P: Policy>(
    policy: &P,
    examples: &[TrainingExample],
    cfg: &PerceptionConfig,
) -> Result<LossSummary, PerceptionError> {
    if examples.is_empty() {
        return Err(PerceptionError::EmptyBatch);
    }
    let mut sum = LossSummary {
        joint: 0.0,
        l_label: 0.0,
        l_rat: 0.0,
        l_conf: 0.0,
    };
    for ex in examples {
        let lp = policy.token_logprobs(&ex.prompt, &ex.target)?;
        let l = ex.segment_losses(&lp)?;
        let w = cfg.segment_weights(ex.agreement)?;
        sum.joint += w.label * l.l_label + w.rat * l.l_rat + w.conf * l.l_conf;
        sum.l_label += l.l_label;
        sum.l_rat += l.l_rat;
        sum.l_conf += l.l_conf;
    }
    let n = examples.len() as f64;
    Ok(LossSummary {
        joint: sum.joint / n,
        l_label: sum.l_label / n,
        l_rat: sum.l_rat / n,
        l_conf: sum.l_conf / n,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub mode: TrainingMode,
    /// Mean per-sample joint loss over the epoch's batches, measured before
    /// each batch's update.
    pub loss: f64,
    pub l_label: f64,
    pub l_rat: f64,
    pub l_conf: f64,
    pub mean_w_label: f64,
    pub mean_w_rat: f64,
}

/// Mini-batch training on the train split. Deterministic for a fixed seed.
/// `on_epoch` sees each epoch's log line as soon as it is complete.
pub fn train_dp<P: Policy>(
    policy: &mut P,
    samples: &[AnnotatedSample],
    cfg: &PerceptionConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, PerceptionError> {
    cfg.validate()?;
    let train: Vec<AnnotatedSample> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(PerceptionError::NoTrainingData);
    }
    let examples = prepare_examples(&train, policy.vocabulary(), cfg.mode)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 6];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut grad = Gradient::zeros(policy.num_params());
            joint_loss_gradient(policy, &batch, cfg, &mut grad)?;
            for ex in &batch {
                let lp = policy.token_logprobs(&ex.prompt, &ex.target)?;
                let l = ex.segment_losses(&lp)?;
                let w = cfg.segment_weights(ex.agreement)?;
                acc[0] += w.label * l.l_label + w.rat * l.l_rat + w.conf * l.l_conf;
                acc[1] += l.l_label;
                acc[2] += l.l_rat;
                acc[3] += l.l_conf;
                acc[4] += w.label;
                acc[5] += w.rat;
            }
            policy.apply_update(&grad, cfg.learning_rate, &mut optimizer)?;
            step += 1;
        }
        let n = examples.len() as f64;
        let log = EpochLog {
            epoch,
            step,
            mode: cfg.mode,
            loss: acc[0] / n,
            l_label: acc[1] / n,
            l_rat: acc[2] / n,
            l_conf: acc[3] / n,
            mean_w_label: acc[4] / n,
            mean_w_rat: acc[5] / n,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
