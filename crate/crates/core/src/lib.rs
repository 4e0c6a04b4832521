//! Training and evaluation engine for uncertainty-aware subjectivity analysis.
//!
//! The engine trains an autoregressive policy to emit a label prediction, a
//! rationale and a confidence score, then aligns that confidence with the
//! disagreement observed among human annotators:
//!
//! 1. **Disagreement perception** ([`perception`]): supervised training with
//!    agreement-dependent weights on the label, rationale and confidence
//!    segments of the target.
//! 2. **Uncertainty alignment** ([`grpo`]): group-relative policy
//!    optimization driven by a judge-scored reasoning reward and a
//!    calibration reward ([`reward`]).
//!
//! Evaluation ([`metrics`]) reports accuracy, macro-F1, the mean absolute
//! error between model and human class distributions, and their Pearson
//! correlation.

pub mod annotation;
pub mod grpo;
pub mod metrics;
pub mod perception;
pub mod pipeline;
pub mod policy;
pub mod protocol;
pub mod reward;

pub use annotation::{
    AnnotatedSample, AnnotationCounts, DataError, DatasetStats, DisagreementDistribution, Label,
    RationalePair, Split, TaskKind,
};
pub use protocol::{ParseFailure, ParseFailureKind, StructuredOutput};
