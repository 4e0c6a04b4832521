//! Non-aggregated annotation data: vote counts, the human disagreement
//! distribution derived from them, and dataset-level summaries.

mod loader;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loader::{load_dataset, parse_dataset, serialize_dataset, write_dataset, FieldPolicy};
pub use synth::{generate_synthetic, AmbiguityBucket, SynthProfile};

/// Tolerance on `p_pos + p_neg = 1`.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: RecordFault },
    #[error("dataset contains no records")]
    EmptyDataset,
    #[error("annotation counts must sum to at least one annotator")]
    ZeroAnnotators,
    #[error("invalid distribution: p_pos={p_pos}, p_neg={p_neg}")]
    InvalidDistribution { p_pos: f64, p_neg: f64 },
    #[error("invalid synthetic profile: {0}")]
    InvalidProfile(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Why a dataset record was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordFault {
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` must be {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("unknown field `{0}` (strict mode)")]
    UnknownField(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("record task `{found}` does not match requested task `{expected}`")]
    TaskMismatch { expected: String, found: String },
    #[error("annotation counts violate pos + neg >= 1 (pos={pos}, neg={neg})")]
    CountInvariantViolated { pos: u64, neg: u64 },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
}

/// Binary subjectivity task with its fixed (pos, neg) label surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sarcasm,
    Sentiment,
    Offense,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Sarcasm, TaskKind::Sentiment, TaskKind::Offense];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Sarcasm => "sarcasm",
            TaskKind::Sentiment => "sentiment",
            TaskKind::Offense => "offense",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn definition(self) -> &'static str {
        match self {
            TaskKind::Sarcasm => {
                "Sarcasm detection. Given a dialogue context and a response, decide whether the response is sarcastic."
            }
            TaskKind::Sentiment => {
                "Sentiment analysis. Decide whether the emotion expressed in the text is positive or negative."
            }
            TaskKind::Offense => {
                "Offensiveness detection. Decide whether the online post is offensive, including implicit forms of aggression."
            }
        }
    }

    pub fn pos_label(self) -> &'static str {
        match self {
            TaskKind::Sarcasm => "Sarcastic",
            TaskKind::Sentiment => "Positive",
            TaskKind::Offense => "Offensive",
        }
    }

    pub fn neg_label(self) -> &'static str {
        match self {
            TaskKind::Sarcasm => "Normal",
            TaskKind::Sentiment => "Negative",
            TaskKind::Offense => "Non-offensive",
        }
    }

    pub fn surface(self, label: Label) -> &'static str {
        match label {
            Label::Pos => self.pos_label(),
            Label::Neg => self.neg_label(),
        }
    }

    /// Case-insensitive match of a label surface string.
    pub fn label_from_surface(self, surface: &str) -> Option<Label> {
        let s = surface.trim();
        if s.eq_ignore_ascii_case(self.pos_label()) {
            Some(Label::Pos)
        } else if s.eq_ignore_ascii_case(self.neg_label()) {
            Some(Label::Neg)
        } else {
            None
        }
    }

    /// Whether inputs for this task carry a dialogue context.
    pub fn has_context(self) -> bool {
        matches!(self, TaskKind::Sarcasm)
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Raw annotator votes for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationCounts {
    pub pos: u32,
    pub neg: u32,
}

impl AnnotationCounts {
    pub fn new(pos: u32, neg: u32) -> Result<Self, DataError> {
        if pos as u64 + neg as u64 == 0 {
            return Err(DataError::ZeroAnnotators);
        }
        Ok(Self { pos, neg })
    }

    pub fn total(&self) -> u32 {
        self.pos + self.neg
    }
}

/// Two-class probability vector `[p_pos, p_neg]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisagreementDistribution {
    pub p_pos: f64,
    pub p_neg: f64,
}

impl DisagreementDistribution {
    pub fn new(p_pos: f64, p_neg: f64) -> Result<Self, DataError> {
        let valid = p_pos.is_finite()
            && p_neg.is_finite()
            && (0.0..=1.0).contains(&p_pos)
            && (0.0..=1.0).contains(&p_neg)
            && (p_pos + p_neg - 1.0).abs() <= DISTRIBUTION_TOLERANCE;
        if !valid {
            return Err(DataError::InvalidDistribution { p_pos, p_neg });
        }
        Ok(Self { p_pos, p_neg })
    }

    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::Pos => self.p_pos,
            Label::Neg => self.p_neg,
        }
    }

    /// Swap the class order.
    pub fn swapped(&self) -> Self {
        Self {
            p_pos: self.p_neg,
            p_neg: self.p_pos,
        }
    }
}

/// Proportions of annotators voting for each class.
pub fn disagreement_distribution(
    counts: AnnotationCounts,
) -> Result<DisagreementDistribution, DataError> {
    let total = counts.pos as u64 + counts.neg as u64;
    if total == 0 {
        return Err(DataError::ZeroAnnotators);
    }
    let p_pos = counts.pos as f64 / total as f64;
    Ok(DisagreementDistribution {
        p_pos,
        p_neg: 1.0 - p_pos,
    })
}

/// Agreement score: the larger of the two class proportions, in `[0.5, 1]`.
pub fn agreement_score(dist: &DisagreementDistribution) -> f64 {
    dist.p_pos.max(dist.p_neg)
}

/// Majority class of a distribution. An exact 0.5/0.5 split resolves to
/// [`Label::Neg`]; the second value reports whether the split was tied.
pub fn majority_label(dist: &DisagreementDistribution) -> (Label, bool) {
    if dist.p_pos > dist.p_neg {
        (Label::Pos, false)
    } else if dist.p_pos < dist.p_neg {
        (Label::Neg, false)
    } else {
        (Label::Neg, true)
    }
}

/// Reference rationale split into its label-justification and
/// disagreement-cue parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalePair {
    pub label_justification: String,
    pub disagreement_cue: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub id: String,
    pub task: TaskKind,
    pub context: Option<String>,
    pub text: String,
    pub counts: AnnotationCounts,
    pub dist: DisagreementDistribution,
    pub agreement: f64,
    pub majority_label: Label,
    /// Set when the vote split exactly in half.
    pub tied: bool,
    pub ref_rationale: Option<RationalePair>,
    pub split: Split,
}

impl AnnotatedSample {
    /// Build a sample, deriving the distribution, agreement and majority label
    /// from the counts.
    pub fn new(
        id: impl Into<String>,
        task: TaskKind,
        context: Option<String>,
        text: impl Into<String>,
        counts: AnnotationCounts,
        ref_rationale: Option<RationalePair>,
        split: Split,
    ) -> Result<Self, DataError> {
        let dist = disagreement_distribution(counts)?;
        let (majority_label, tied) = majority_label(&dist);
        Ok(Self {
            id: id.into(),
            task,
            context,
            text: text.into(),
            counts,
            dist,
            agreement: agreement_score(&dist),
            majority_label,
            tied,
            ref_rationale,
            split,
        })
    }

    pub fn is_unanimous(&self) -> bool {
        self.counts.pos == 0 || self.counts.neg == 0
    }
}

/// Table-style summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_total: usize,
    pub annotator_range: (u32, u32),
    pub avg_agreement: f64,
    pub avg_length_words: f64,
}

impl DatasetStats {
    pub const HEADER: [&'static str; 9] = [
        "Dataset", "#Pos.", "#Neg.", "#Train", "#Test", "#Total", "#Anno.", "Avg. C^h", "Avg. L",
    ];

    pub fn annotator_label(&self) -> String {
        let (lo, hi) = self.annotator_range;
        if lo == hi {
            lo.to_string()
        } else {
            format!("{lo}-{hi}")
        }
    }

    /// One row in table column order.
    pub fn row(&self, dataset: &str) -> Vec<String> {
        vec![
            dataset.to_string(),
            self.n_pos.to_string(),
            self.n_neg.to_string(),
            self.n_train.to_string(),
            self.n_test.to_string(),
            self.n_total.to_string(),
            self.annotator_label(),
            format!("{:.2}", self.avg_agreement),
            format!("{:.2}", self.avg_length_words),
        ]
    }
}

/// Counts, agreement and length averages. Class counts use the majority label.
pub fn dataset_stats(samples: &[AnnotatedSample]) -> Result<DatasetStats, DataError> {
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n_total = samples.len();
    let n_pos = samples
        .iter()
        .filter(|s| s.majority_label == Label::Pos)
        .count();
    let n_train = samples.iter().filter(|s| s.split == Split::Train).count();
    let lo = samples.iter().map(|s| s.counts.total()).min().unwrap_or(0);
    let hi = samples.iter().map(|s| s.counts.total()).max().unwrap_or(0);
    let avg_agreement = samples.iter().map(|s| s.agreement).sum::<f64>() / n_total as f64;
    let words: usize = samples
        .iter()
        .map(|s| s.text.split_whitespace().count())
        .sum();
    Ok(DatasetStats {
        n_pos,
        n_neg: n_total - n_pos,
        n_train,
        n_test: n_total - n_train,
        n_total,
        annotator_range: (lo, hi),
        avg_agreement,
        avg_length_words: words as f64 / n_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, pos: u32, neg: u32, split: Split) -> AnnotatedSample {
        AnnotatedSample::new(
            id,
            TaskKind::Offense,
            None,
            "a b c",
            AnnotationCounts::new(pos, neg).unwrap(),
            None,
            split,
        )
        .unwrap()
    }

    #[test]
    fn distribution_examples() {
        let d = disagreement_distribution(AnnotationCounts { pos: 3, neg: 2 }).unwrap();
        assert!((d.p_pos - 0.6).abs() < 1e-12 && (d.p_neg - 0.4).abs() < 1e-12);
        let d = disagreement_distribution(AnnotationCounts { pos: 1, neg: 1 }).unwrap();
        assert_eq!((d.p_pos, d.p_neg), (0.5, 0.5));
        let d = disagreement_distribution(AnnotationCounts { pos: 5, neg: 0 }).unwrap();
        assert_eq!((d.p_pos, d.p_neg), (1.0, 0.0));
        assert_eq!(
            disagreement_distribution(AnnotationCounts { pos: 0, neg: 0 }),
            Err(DataError::ZeroAnnotators)
        );
    }

    #[test]
    fn agreement_and_majority() {
        let d = DisagreementDistribution::new(0.6, 0.4).unwrap();
        assert_eq!(agreement_score(&d), 0.6);
        assert_eq!(majority_label(&d), (Label::Pos, false));
        let d = DisagreementDistribution::new(0.5, 0.5).unwrap();
        assert_eq!(agreement_score(&d), 0.5);
        assert_eq!(majority_label(&d), (Label::Neg, true));
        let d = DisagreementDistribution::new(0.9, 0.1).unwrap();
        assert_eq!(agreement_score(&d), 0.9);
        let d = DisagreementDistribution::new(0.4, 0.6).unwrap();
        assert_eq!(majority_label(&d), (Label::Neg, false));
    }

    #[test]
    fn sample_derivations() {
        let s = sample("a", 3, 2, Split::Train);
        assert_eq!(s.majority_label, Label::Pos);
        assert!((s.agreement - 0.6).abs() < 1e-12);
        let s = sample("b", 0, 5, Split::Train);
        assert_eq!((s.dist.p_pos, s.dist.p_neg), (0.0, 1.0));
        assert_eq!(s.agreement, 1.0);
        assert_eq!(s.majority_label, Label::Neg);
        assert!(s.is_unanimous());
    }

    #[test]
    fn invalid_distribution_rejected() {
        assert!(DisagreementDistribution::new(0.7, 0.4).is_err());
        assert!(DisagreementDistribution::new(-0.1, 1.1).is_err());
        assert!(DisagreementDistribution::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn stats_fixture() {
        // agreements 0.6, 0.8, 1.0, 0.6 with two samples per class
        let samples = vec![
            sample("a", 3, 2, Split::Train),
            sample("b", 4, 1, Split::Train),
            sample("c", 0, 5, Split::Test),
            sample("d", 2, 3, Split::Test),
        ];
        let stats = dataset_stats(&samples).unwrap();
        assert!((stats.avg_agreement - 0.75).abs() < 1e-12);
        assert_eq!((stats.n_pos, stats.n_neg), (2, 2));
        assert_eq!((stats.n_train, stats.n_test, stats.n_total), (2, 2, 4));
        assert_eq!(stats.annotator_range, (5, 5));
        assert_eq!(stats.avg_length_words, 3.0);
        assert_eq!(stats.row("X")[6], "5");
    }

    #[test]
    fn stats_single_and_empty() {
        let stats = dataset_stats(&[sample("a", 1, 0, Split::Train)]).unwrap();
        assert_eq!(stats.n_total, 1);
        assert_eq!(dataset_stats(&[]), Err(DataError::EmptyDataset));
    }

    #[test]
    fn label_surfaces() {
        assert_eq!(TaskKind::Offense.label_from_surface("non-OFFENSIVE"), Some(Label::Neg));
        assert_eq!(TaskKind::Sarcasm.label_from_surface(" Sarcastic "), Some(Label::Pos));
        assert_eq!(TaskKind::Sentiment.label_from_surface("Neutral"), None);
        assert_eq!(TaskKind::from_name("offense"), Some(TaskKind::Offense));
    }
}
