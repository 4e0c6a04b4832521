//! Autoregressive policy: tokenization, scoring, sampling, gradients,
//! optimizer steps and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod segments;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    config_hash, load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointManifest,
    TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use model::{quantize, tensor_shapes, PolicyConfig, ReferencePolicy};
pub use optim::{Optimizer, OptimizerKind};
pub use segments::{label_segments, segment_spans, SegmentSpans};
pub use vocab::{confidence_literals, tokenize, TokenId, Vocabulary, BOS, EOS, NEWLINE, UNK};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("sequence too long: prompt {prompt} + target {target} tokens (max target {max_target}, max total {max_total})")]
    SequenceTooLong {
        prompt: usize,
        target: usize,
        max_target: usize,
        max_total: usize,
    },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfVocabulary(TokenId),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("temperature must be finite and positive, got {0}")]
    InvalidTemperature(f64),
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient contains a non-finite value")]
    NonFiniteGradient,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("malformed target: {0}")]
    MalformedTarget(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint already exists at {0}")]
    AlreadyExists(String),
    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },
}

/// Flat gradient buffer aligned with the policy's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// A target sequence with one loss weight per token.
#[derive(Debug, Clone, Copy)]
pub struct WeightedTarget<'a> {
    pub tokens: &'a [TokenId],
    pub weights: &'a [f64],
}

/// One sampled completion. `tokens` includes the terminating `<eos>` when the
/// completion stopped on its own; `logprobs` are untempered policy values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCompletion {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub text: String,
    pub terminated: bool,
}

/// Operations the trainers need from a policy.
pub trait Policy {
    fn vocabulary(&self) -> &Vocabulary;
    fn max_target_len(&self) -> usize;
    fn num_params(&self) -> usize;
    fn token_logprobs(&self, prompt: &[TokenId], target: &[TokenId])
        -> Result<Vec<f64>, PolicyError>;
    fn sample_group(
        &self,
        prompt: &[TokenId],
        group: usize,
        temperature: f64,
        seed: u64,
        max_new_tokens: usize,
    ) -> Result<Vec<SampledCompletion>, PolicyError>;
    fn greedy_decode(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
    ) -> Result<SampledCompletion, PolicyError>;
    /// Add the gradient of `-sum w_t log p(s_t)` into `grad`; return the
    /// objective value.
    fn objective_gradient(
        &self,
        prompt: &[TokenId],
        targets: &[WeightedTarget<'_>],
        grad: &mut Gradient,
    ) -> Result<f64, PolicyError>;
    fn apply_update(
        &mut self,
        grad: &Gradient,
        learning_rate: f64,
        optimizer: &mut Optimizer,
    ) -> Result<(), PolicyError>;
}

impl Policy for ReferencePolicy {
    fn vocabulary(&self) -> &Vocabulary {
        self.vocab()
    }

    fn max_target_len(&self) -> usize {
        self.config().max_target_len
    }

    fn num_params(&self) -> usize {
        ReferencePolicy::num_params(self)
    }

    fn token_logprobs(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        ReferencePolicy::token_logprobs(self, prompt, target)
    }

    fn sample_group(
        &self,
        prompt: &[TokenId],
        group: usize,
        temperature: f64,
        seed: u64,
        max_new_tokens: usize,
    ) -> Result<Vec<SampledCompletion>, PolicyError> {
        ReferencePolicy::sample_group(self, prompt, group, temperature, seed, max_new_tokens)
    }

    fn greedy_decode(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
    ) -> Result<SampledCompletion, PolicyError> {
        ReferencePolicy::greedy_decode(self, prompt, max_new_tokens)
    }

    fn objective_gradient(
        &self,
        prompt: &[TokenId],
        targets: &[WeightedTarget<'_>],
        grad: &mut Gradient,
    ) -> Result<f64, PolicyError> {
        ReferencePolicy::objective_gradient(self, prompt, targets, grad)
    }

    /// Optimizer step; parameters are rounded to `f32` afterwards so the
    /// checkpoint blob stays exact.
    fn apply_update(
        &mut self,
        grad: &Gradient,
        learning_rate: f64,
        optimizer: &mut Optimizer,
    ) -> Result<(), PolicyError> {
        let params = self.params_mut();
        optimizer.step(params, grad, learning_rate)?;
        params.iter_mut().for_each(|p| *p = quantize(*p));
        Ok(())
    }
}
