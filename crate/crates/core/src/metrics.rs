//! Evaluation: label metrics (accuracy, macro-F1), uncertainty metrics (mean
//! MAE against the human distribution, Pearson correlation) and confidence
//! histograms, plus JSON/CSV report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotatedSample, DisagreementDistribution, Label, Split};
use crate::policy::{Policy, PolicyError, EOS};
use crate::protocol::{
    model_distribution, parse_output_with_cap, render_prompt, INVALID_OUTPUT_CONFIDENCE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("series has zero variance")]
    DegenerateSeries,
    #[error("series lengths differ or are shorter than 2")]
    TooFewRecords,
    #[error("need at least 2 histogram bins, got {0}")]
    InvalidBins(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// One scored test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gold: Label,
    pub human: DisagreementDistribution,
    /// `None` when the output did not parse.
    pub prediction: Option<Label>,
    pub confidence: f64,
    pub model: DisagreementDistribution,
    pub parse_valid: bool,
    pub agreement: f64,
    pub unanimous: bool,
}

impl EvalRecord {
    /// Record for an output that parsed to `(prediction, confidence)`.
    pub fn valid(sample: &AnnotatedSample, prediction: Label, confidence: f64) -> Self {
        let confidence = confidence.clamp(INVALID_OUTPUT_CONFIDENCE, 1.0);
        Self {
            id: sample.id.clone(),
            gold: sample.majority_label,
            human: sample.dist,
            prediction: Some(prediction),
            confidence,
            model: model_distribution(prediction, confidence).expect("confidence clamped"),
            parse_valid: true,
            agreement: sample.agreement,
            unanimous: sample.is_unanimous(),
        }
    }

    /// Record for an unparsable output: near-0.5 confidence on the wrong
    /// side, so it counts as a mismatch and sits at maximal uncertainty.
    pub fn invalid(sample: &AnnotatedSample) -> Self {
        let model = model_distribution(sample.majority_label.flipped(), INVALID_OUTPUT_CONFIDENCE)
            .expect("constant is in range");
        Self {
            id: sample.id.clone(),
            gold: sample.majority_label,
            human: sample.dist,
            prediction: None,
            confidence: INVALID_OUTPUT_CONFIDENCE,
            model,
            parse_valid: false,
            agreement: sample.agreement,
            unanimous: sample.is_unanimous(),
        }
    }

    pub fn correct(&self) -> bool {
        self.prediction == Some(self.gold)
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<(), MetricsError> {
    if records.is_empty() {
        Err(MetricsError::EmptyEvalSet)
    } else {
        Ok(())
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    non_empty(records)?;
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// Per-class F1 for `class`, or `None` when the class appears in neither the
/// gold labels nor the predictions.
pub fn class_f1(records: &[EvalRecord], class: Label) -> Option<f64> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for r in records {
        let pred = r.prediction == Some(class);
        let gold = r.gold == class;
        match (pred, gold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Unweighted mean of the two class F1 scores; an absent class counts 0.
pub fn macro_f1(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    non_empty(records)?;
    let pos = class_f1(records, Label::Pos).unwrap_or(0.0);
    let neg = class_f1(records, Label::Neg).unwrap_or(0.0);
    Ok((pos + neg) / 2.0)
}

pub fn mean_mae(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    non_empty(records)?;
    let total: f64 = records
        .iter()
        .map(|r| {
            0.5 * ((r.model.p_pos - r.human.p_pos).abs() + (r.model.p_neg - r.human.p_neg).abs())
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Pearson correlation of two equal-length series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MetricsError::TooFewRecords);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between model and human positive-class probabilities.
pub fn pearson_coef(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    non_empty(records)?;
    let m: Vec<f64> = records.iter().map(|r| r.model.p_pos).collect();
    let h: Vec<f64> = records.iter().map(|r| r.human.p_pos).collect();
    pearson(&m, &h)
}

/// Correlation between model confidence and human agreement score.
pub fn confidence_agreement_coef(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    non_empty(records)?;
    let m: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    let h: Vec<f64> = records.iter().map(|r| r.agreement).collect();
    pearson(&m, &h)
}

/// Paired histograms of model and human positive-class probabilities over
/// shared equal-width bins on [0, 1]; the last bin includes 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub edges: Vec<f64>,
    pub model: Vec<usize>,
    pub human: Vec<usize>,
}

fn bin_of(x: f64, n_bins: usize) -> usize {
    ((x.clamp(0.0, 1.0) * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn confidence_histogram(
    records: &[EvalRecord],
    n_bins: usize,
) -> Result<ConfidenceHistogram, MetricsError> {
    if n_bins < 2 {
        return Err(MetricsError::InvalidBins(n_bins));
    }
    non_empty(records)?;
    let mut model = vec![0; n_bins];
    let mut human = vec![0; n_bins];
    for r in records {
        model[bin_of(r.model.p_pos, n_bins)] += 1;
        human[bin_of(r.human.p_pos, n_bins)] += 1;
    }
    Ok(ConfidenceHistogram {
        edges: (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
        model,
        human,
    })
}

impl ConfidenceHistogram {
    /// Fraction of mass in the first and last bins.
    pub fn outer_mass(counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (counts[0] + counts[counts.len() - 1]) as f64 / total as f64
    }
}

/// How a model's confidence is read out at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Greedy-decode the three-field output and parse it.
    Emitted,
    /// Score both `Prediction: <label>` targets; the confidence is the
    /// larger of their normalized likelihoods. For label-only models.
    LabelLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub source: ConfidenceSource,
    pub max_new_tokens: usize,
    pub rationale_cap: usize,
    pub histogram_bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            source: ConfidenceSource::Emitted,
            max_new_tokens: 128,
            rationale_cap: crate::protocol::DEFAULT_RATIONALE_CAP,
            histogram_bins: 10,
        }
    }
}

/// Score one sample.
pub fn evaluate_sample<P: Policy>(
    policy: &P,
    sample: &AnnotatedSample,
    opts: &EvalOptions,
) -> Result<EvalRecord, MetricsError> {
    let vocab = policy.vocabulary();
    let prompt = vocab.encode_prompt(&render_prompt(sample).text);
    match opts.source {
        ConfidenceSource::Emitted => {
            let out = policy.greedy_decode(&prompt, opts.max_new_tokens)?;
            Ok(
                match parse_output_with_cap(&out.text, sample.task, opts.rationale_cap) {
                    Ok(o) => EvalRecord::valid(sample, o.prediction, o.confidence),
                    Err(_) => EvalRecord::invalid(sample),
                },
            )
        }
        ConfidenceSource::LabelLikelihood => {
            let score = |label: Label| -> Result<f64, MetricsError> {
                let mut target = vocab.encode(&format!("Prediction: {}", sample.task.surface(label)));
                target.push(EOS);
                Ok(policy.token_logprobs(&prompt, &target)?.iter().sum())
            };
            let (lp, ln) = (score(Label::Pos)?, score(Label::Neg)?);
            let p_pos = 1.0 / (1.0 + (ln - lp).exp());
            let (pred, conf) = if p_pos >= 0.5 {
                (Label::Pos, p_pos)
            } else {
                (Label::Neg, 1.0 - p_pos)
            };
            Ok(EvalRecord::valid(sample, pred, conf))
        }
    }
}

/// Score the test split of `samples`.
pub fn evaluate<P: Policy>(
    policy: &P,
    samples: &[AnnotatedSample],
    opts: &EvalOptions,
) -> Result<Vec<EvalRecord>, MetricsError> {
    let test: Vec<&AnnotatedSample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    test.into_iter()
        .map(|s| evaluate_sample(policy, s, opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub source: String,
    pub target: String,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_mae: f64,
    /// `None` when either series is constant.
    pub pearson_coef: Option<f64>,
    pub confidence_agreement_coef: Option<f64>,
    pub parse_valid_rate: f64,
    /// Accuracy on samples every annotator agreed on.
    pub unanimous_accuracy: Option<f64>,
    /// Classes absent from both gold labels and predictions (F1 counted 0).
    pub absent_classes: Vec<Label>,
    pub histogram: ConfidenceHistogram,
    pub outer_mass_model: f64,
    pub outer_mass_human: f64,
}

impl EvalReport {
    pub fn build(
        records: &[EvalRecord],
        run_id: &str,
        source: &str,
        target: &str,
        histogram_bins: usize,
    ) -> Result<Self, MetricsError> {
        let unanimous: Vec<EvalRecord> = records.iter().filter(|r| r.unanimous).cloned().collect();
        let histogram = confidence_histogram(records, histogram_bins)?;
        let optional = |r: Result<f64, MetricsError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(MetricsError::DegenerateSeries) | Err(MetricsError::TooFewRecords) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            run_id: run_id.to_string(),
            source: source.to_string(),
            target: target.to_string(),
            n: records.len(),
            accuracy: accuracy(records)?,
            macro_f1: macro_f1(records)?,
            mean_mae: mean_mae(records)?,
            pearson_coef: optional(pearson_coef(records))?,
            confidence_agreement_coef: optional(confidence_agreement_coef(records))?,
            parse_valid_rate: records.iter().filter(|r| r.parse_valid).count() as f64
                / records.len() as f64,
            unanimous_accuracy: if unanimous.is_empty() {
                None
            } else {
                Some(accuracy(&unanimous)?)
            },
            absent_classes: [Label::Pos, Label::Neg]
                .into_iter()
                .filter(|&c| class_f1(records, c).is_none())
                .collect(),
            outer_mass_model: ConfidenceHistogram::outer_mass(&histogram.model),
            outer_mass_human: ConfidenceHistogram::outer_mass(&histogram.human),
            histogram,
        })
    }

    /// One-line summary in `Acc. F1 MAE Coef.` order.
    pub fn summary_row(&self) -> String {
        let coef = self
            .pearson_coef
            .map(|c| format!("{c:.4}"))
            .unwrap_or_else(|| "n/a".into());
        format!(
            "{}->{}  Acc {:.4}  F1 {:.4}  MAE {:.4}  Coef {}",
            self.source, self.target, self.accuracy, self.macro_f1, self.mean_mae, coef
        )
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("section,key,value,model,human\n");
        for (k, v) in [
            ("accuracy", self.accuracy.to_string()),
            ("macro_f1", self.macro_f1.to_string()),
            ("mean_mae", self.mean_mae.to_string()),
            ("pearson_coef", opt(self.pearson_coef)),
            ("confidence_agreement_coef", opt(self.confidence_agreement_coef)),
            ("parse_valid_rate", self.parse_valid_rate.to_string()),
            ("unanimous_accuracy", opt(self.unanimous_accuracy)),
            ("outer_mass_model", self.outer_mass_model.to_string()),
            ("outer_mass_human", self.outer_mass_human.to_string()),
            ("n", self.n.to_string()),
        ] {
            out.push_str(&format!("metric,{k},{v},,\n"));
        }
        let h = &self.histogram;
        for i in 0..h.model.len() {
            out.push_str(&format!(
                "histogram,{:.2}-{:.2},,{},{}\n",
                h.edges[i],
                h.edges[i + 1],
                h.model[i],
                h.human[i]
            ));
        }
        out
    }

    /// Base file name: run id and dataset pair.
    pub fn file_stem(&self) -> String {
        format!("{}_{}-{}", self.run_id, self.source, self.target)
    }

    /// Write `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), MetricsError> {
        let io = |p: &Path, e: std::io::Error| MetricsError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let json_path = dir.join(format!("{}.json", self.file_stem()));
        let csv_path = dir.join(format!("{}.csv", self.file_stem()));
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json_path, json).map_err(|e| io(&json_path, e))?;
        fs::write(&csv_path, self.to_csv()).map_err(|e| io(&csv_path, e))?;
        Ok((json_path, csv_path))
    }
}

/// Evaluate a policy trained on `source` against another task's test split.
pub fn transfer_eval<P: Policy>(
    policy: &P,
    target_samples: &[AnnotatedSample],
    opts: &EvalOptions,
    run_id: &str,
    source: &str,
    target: &str,
) -> Result<EvalReport, MetricsError> {
    let records = evaluate(policy, target_samples, opts)?;
    EvalReport::build(&records, run_id, source, target, opts.histogram_bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(gold: Label, pred: Option<Label>, p_model: f64, p_human: f64) -> EvalRecord {
        EvalRecord {
            id: "r".into(),
            gold,
            human: DisagreementDistribution {
                p_pos: p_human,
                p_neg: 1.0 - p_human,
            },
            prediction: pred,
            confidence: p_model.max(1.0 - p_model),
            model: DisagreementDistribution {
                p_pos: p_model,
                p_neg: 1.0 - p_model,
            },
            parse_valid: pred.is_some(),
            agreement: p_human.max(1.0 - p_human),
            unanimous: p_human == 0.0 || p_human == 1.0,
        }
    }

    use Label::{Neg, Pos};

    #[test]
    fn label_metric_examples() {
        let rs = [
            rec(Pos, Some(Pos), 0.9, 1.0),
            rec(Neg, Some(Pos), 0.9, 0.0),
            rec(Neg, Some(Neg), 0.1, 0.0),
        ];
        assert!((accuracy(&rs).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((macro_f1(&rs).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let invalid = [rec(Pos, None, 0.5, 1.0), rec(Neg, None, 0.5, 0.0)];
        assert_eq!(accuracy(&invalid).unwrap(), 0.0);
        let all_pos = [rec(Neg, Some(Pos), 0.9, 0.0), rec(Neg, Some(Pos), 0.9, 0.0)];
        assert_eq!(macro_f1(&all_pos).unwrap(), 0.0);
        assert_eq!(accuracy(&[]), Err(MetricsError::EmptyEvalSet));
    }

    #[test]
    fn mae_examples() {
        assert!((mean_mae(&[rec(Pos, Some(Pos), 0.75, 0.6)]).unwrap() - 0.15).abs() < 1e-12);
        let two = [rec(Pos, Some(Pos), 0.7, 0.6), rec(Pos, Some(Pos), 0.9, 0.6)];
        assert!((mean_mae(&two).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let r = pearson(&[0.55, 0.85, 0.95], &[0.6, 0.8, 1.0]).unwrap();
        assert!((r - 0.9607689).abs() < 1e-6, "{r}");
        assert_eq!(pearson(&[0.2, 0.4], &[0.9, 0.7]).unwrap(), -1.0);
        assert_eq!(
            pearson(&[0.5, 0.5], &[0.1, 0.2]),
            Err(MetricsError::DegenerateSeries)
        );
    }

    #[test]
    fn histogram_bins() {
        let rs: Vec<_> = (0..5).map(|_| rec(Pos, Some(Pos), 0.5, 1.0)).collect();
        let h = confidence_histogram(&rs, 10).unwrap();
        assert_eq!(h.model[5], 5);
        assert_eq!(h.human[9], 5);
        assert_eq!(h.model.iter().sum::<usize>(), 5);
        assert_eq!(ConfidenceHistogram::outer_mass(&h.human), 1.0);
        assert_eq!(confidence_histogram(&rs, 1), Err(MetricsError::InvalidBins(1)));
    }

    #[test]
    fn report_files() {
        let rs = [rec(Pos, Some(Pos), 0.8, 0.6), rec(Neg, Some(Neg), 0.3, 0.2)];
        let report = EvalReport::build(&rs, "run1", "sarcasm", "offense", 10).unwrap();
        assert!(report.absent_classes.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let (j, c) = report.write(dir.path()).unwrap();
        assert!(j.ends_with("run1_sarcasm-offense.json"));
        let csv = fs::read_to_string(c).unwrap();
        assert_eq!(csv.lines().count(), 1 + 10 + 10);
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
