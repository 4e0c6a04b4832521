//! Prompt rendering and the three-field output format
//! (`Prediction:` / `Rationale:` / `Confidence:`).

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotatedSample, DisagreementDistribution, Label, TaskKind};

/// Instruction template with `{task_definition}`, `{pos_label}`,
/// `{neg_label}`, `{context}` and `{input}` placeholders.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

/// Default cap on rationale length, in whitespace tokens.
pub const DEFAULT_RATIONALE_CAP: usize = 100;

/// Confidence used for outputs that could not be parsed.
pub const INVALID_OUTPUT_CONFIDENCE: f64 = 0.5 + 1e-6;

/// Smallest confidence literal the two-decimal format can express in range.
pub const MIN_CONFIDENCE_LITERAL: f64 = 0.51;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("confidence {0} outside (0.5, 1.0]")]
    ConfidenceOutOfRange(String),
    #[error("sample `{0}` has no reference rationale")]
    MissingReferenceRationale(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRendering {
    pub text: String,
}

/// Parsed model emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub prediction: Label,
    pub rationale: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseFailureKind {
    MissingField,
    UnknownLabel,
    ConfidenceOutOfRange,
    ConfidenceUnparsable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {span}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    /// The offending text, or the missing field's name.
    pub span: String,
}

impl ParseFailure {
    fn new(kind: ParseFailureKind, span: impl Into<String>) -> Self {
        Self {
            kind,
            span: span.into(),
        }
    }
}

fn render_input(sample: &AnnotatedSample) -> String {
    match &sample.context {
        Some(ctx) => format!("Context: {ctx}\nResponse: {}", sample.text),
        None => sample.text.clone(),
    }
}

/// Fill the instruction template for one sample.
pub fn render_prompt(sample: &AnnotatedSample) -> PromptRendering {
    let task = sample.task;
    let text = PROMPT_TEMPLATE
        .replace("{task_definition}", task.definition())
        .replace("{pos_label}", task.pos_label())
        .replace("{neg_label}", task.neg_label())
        .replace("{context}", "")
        .replace("{input}", &render_input(sample));
    PromptRendering { text }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Prediction,
    Rationale,
    Confidence,
}

/// Recognize a `Field: value` line, tolerating a leading bullet and any case.
fn field_line(line: &str) -> Option<(Field, &str)> {
    let mut s = line.trim_start();
    if let Some(rest) = s.strip_prefix('-').or_else(|| s.strip_prefix('*')) {
        s = rest.trim_start();
    }
    for (name, field) in [
        ("prediction", Field::Prediction),
        ("rationale", Field::Rationale),
        ("confidence", Field::Confidence),
    ] {
        let Some(head) = s.get(..name.len()) else {
            continue;
        };
        if head.eq_ignore_ascii_case(name) {
            let rest = s[name.len()..].trim_start();
            if let Some(value) = rest.strip_prefix(':') {
                return Some((field, value.trim()));
            }
        }
    }
    None
}

fn decimal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)$").unwrap())
}

fn clean_label(value: &str) -> &str {
    value
        .trim()
        .trim_matches(|c| matches!(c, '<' | '>' | '"' | '\'' | '*' | '`'))
        .trim_end_matches('.')
        .trim()
}

struct RawFields<'a> {
    prediction: Option<&'a str>,
    rationale: Option<String>,
    confidence: Option<&'a str>,
}

fn collect_fields(text: &str) -> RawFields<'_> {
    let mut raw = RawFields {
        prediction: None,
        rationale: None,
        confidence: None,
    };
    let mut current: Option<Field> = None;
    for line in text.lines() {
        match field_line(line) {
            Some((field, value)) => {
                current = Some(field);
                match field {
                    Field::Prediction if raw.prediction.is_none() => raw.prediction = Some(value),
                    Field::Rationale if raw.rationale.is_none() => {
                        raw.rationale = Some(value.to_string())
                    }
                    Field::Confidence if raw.confidence.is_none() => raw.confidence = Some(value),
                    // repeated field: first occurrence wins, later text ignored
                    _ => current = None,
                }
            }
            None => {
                if current == Some(Field::Rationale) {
                    let extra = line.trim();
                    if let Some(r) = raw.rationale.as_mut() {
                        if !extra.is_empty() {
                            if !r.is_empty() {
                                r.push(' ');
                            }
                            r.push_str(extra);
                        }
                    }
                }
            }
        }
    }
    raw
}

/// Parse only the prediction line.
pub fn parse_prediction(text: &str, task: TaskKind) -> Option<Label> {
    collect_fields(text)
        .prediction
        .and_then(|v| task.label_from_surface(clean_label(v)))
}

/// Parse with the default rationale cap.
pub fn parse_output(text: &str, task: TaskKind) -> Result<StructuredOutput, ParseFailure> {
    parse_output_with_cap(text, task, DEFAULT_RATIONALE_CAP)
}

/// Parse a model emission. Never panics; every malformed input maps to a
/// [`ParseFailure`]. Rationales longer than `rationale_cap` whitespace tokens
/// are truncated to the cap.
pub fn parse_output_with_cap(
    text: &str,
    task: TaskKind,
    rationale_cap: usize,
) -> Result<StructuredOutput, ParseFailure> {
    use ParseFailureKind::*;
    let raw = collect_fields(text);

    let pred_raw = raw
        .prediction
        .ok_or_else(|| ParseFailure::new(MissingField, "Prediction"))?;
    let prediction = task
        .label_from_surface(clean_label(pred_raw))
        .ok_or_else(|| ParseFailure::new(UnknownLabel, pred_raw))?;

    let rationale = raw
        .rationale
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| ParseFailure::new(MissingField, "Rationale"))?;
    let words: Vec<&str> = rationale.split_whitespace().collect();
    let rationale = if words.len() > rationale_cap {
        words[..rationale_cap].join(" ")
    } else {
        rationale.trim().to_string()
    };

    let conf_raw = raw
        .confidence
        .ok_or_else(|| ParseFailure::new(MissingField, "Confidence"))?;
    let token = conf_raw
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_end_matches(['.', ',', ';'])
        .trim_matches(|c| matches!(c, '<' | '>' | '"' | '\'' | '*' | '`'));
    if !decimal_re().is_match(token) {
        return Err(ParseFailure::new(ConfidenceUnparsable, conf_raw));
    }
    let confidence: f64 = token
        .parse()
        .map_err(|_| ParseFailure::new(ConfidenceUnparsable, conf_raw))?;
    if !(confidence > 0.5 && confidence <= 1.0) {
        return Err(ParseFailure::new(ConfidenceOutOfRange, conf_raw));
    }

    Ok(StructuredOutput {
        prediction,
        rationale,
        confidence,
    })
}

/// Class distribution implied by a prediction and its confidence.
pub fn model_distribution(
    prediction: Label,
    confidence: f64,
) -> Result<DisagreementDistribution, ProtocolError> {
    if !(confidence > 0.5 && confidence <= 1.0) {
        return Err(ProtocolError::ConfidenceOutOfRange(confidence.to_string()));
    }
    let other = 1.0 - confidence;
    Ok(match prediction {
        Label::Pos => DisagreementDistribution {
            p_pos: confidence,
            p_neg: other,
        },
        Label::Neg => DisagreementDistribution {
            p_pos: other,
            p_neg: confidence,
        },
    })
}

/// Join the two rationale parts with a "However," connective.
pub fn join_rationale(label_justification: &str, disagreement_cue: &str) -> String {
    let lab = label_justification.trim().trim_end_matches('.');
    format!("{lab}. However, {}", disagreement_cue.trim())
}

/// Two-decimal confidence literal; values that would round to 0.50 are
/// raised to 0.51 so the literal stays inside (0.5, 1.0].
pub fn confidence_literal(confidence: f64) -> String {
    let q = (confidence * 100.0).round() / 100.0;
    format!("{:.2}", q.max(MIN_CONFIDENCE_LITERAL))
}

/// Full supervised target for a sample.
pub fn serialize_target(
    sample: &AnnotatedSample,
    gold_confidence: f64,
) -> Result<String, ProtocolError> {
    if !(0.5..=1.0).contains(&gold_confidence) {
        return Err(ProtocolError::ConfidenceOutOfRange(
            gold_confidence.to_string(),
        ));
    }
    let r = sample
        .ref_rationale
        .as_ref()
        .ok_or_else(|| ProtocolError::MissingReferenceRationale(sample.id.clone()))?;
    Ok(format!(
        "Prediction: {}\nRationale: {}\nConfidence: {}",
        sample.task.surface(sample.majority_label),
        join_rationale(&r.label_justification, &r.disagreement_cue),
        confidence_literal(gold_confidence)
    ))
}

/// Label-only target used by hard-label supervision.
pub fn serialize_label_target(sample: &AnnotatedSample) -> String {
    format!("Prediction: {}", sample.task.surface(sample.majority_label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{AnnotationCounts, RationalePair, Split};

    fn sample(task: TaskKind, context: Option<&str>, pos: u32, neg: u32) -> AnnotatedSample {
        AnnotatedSample::new(
            "s1",
            task,
            context.map(String::from),
            "HELLOOOOO STEVE!",
            AnnotationCounts::new(pos, neg).unwrap(),
            Some(RationalePair {
                label_justification: "The exaggerated reply mocks the greeting.".into(),
                disagreement_cue: "some may read it as playful excitement.".into(),
            }),
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn template_has_format_lines() {
        for line in [
            "- Prediction: <prediction label>",
            "- Rationale: <rationale for your prediction>",
            "- Confidence: <a float in (0.5, 1.0]>",
        ] {
            assert!(PROMPT_TEMPLATE.contains(line));
        }
    }

    #[test]
    fn prompt_with_and_without_context() {
        let s = sample(TaskKind::Sarcasm, Some("Steve says hi!"), 3, 2);
        let p = render_prompt(&s).text;
        assert!(p.contains("Context: Steve says hi!\nResponse: HELLOOOOO STEVE!"));
        assert!(p.contains("labeled as Sarcastic or Normal"));
        assert_eq!(p, render_prompt(&s).text);

        let s = sample(TaskKind::Sentiment, None, 3, 2);
        let p = render_prompt(&s).text;
        assert!(!p.contains("Context:"));
        assert!(p.ends_with("Input:\nHELLOOOOO STEVE!\n"));
        assert!(!p.contains('{'));
    }

    #[test]
    fn parses_case_one_output() {
        let text = "Prediction: Offensive\nRationale: Soy is used to mock. However, it may be humor.\nConfidence: 0.75";
        let out = parse_output(text, TaskKind::Offense).unwrap();
        assert_eq!(out.prediction, Label::Pos);
        assert_eq!(out.confidence, 0.75);
        assert!(out.rationale.starts_with("Soy is used"));
    }

    #[test]
    fn tolerant_of_bullets_and_case() {
        let text = "- prediction : non-offensive\n- RATIONALE: calm\nwording\n- Confidence: 0.9.";
        let out = parse_output(text, TaskKind::Offense).unwrap();
        assert_eq!(out.prediction, Label::Neg);
        assert_eq!(out.rationale, "calm wording");
        assert_eq!(out.confidence, 0.9);
    }

    #[test]
    fn failure_kinds() {
        let t = TaskKind::Offense;
        let kind = |s: &str| parse_output(s, t).unwrap_err().kind;
        assert_eq!(kind("Prediction: Offensive\nRationale: x"), ParseFailureKind::MissingField);
        assert_eq!(kind("Rationale: x\nConfidence: 0.7"), ParseFailureKind::MissingField);
        assert_eq!(
            kind("Prediction: Maybe\nRationale: x\nConfidence: 0.7"),
            ParseFailureKind::UnknownLabel
        );
        assert_eq!(
            kind("Prediction: Offensive\nRationale: x\nConfidence: 0.3"),
            ParseFailureKind::ConfidenceOutOfRange
        );
        assert_eq!(
            kind("Prediction: Offensive\nRationale: x\nConfidence: 0.5"),
            ParseFailureKind::ConfidenceOutOfRange
        );
        assert_eq!(
            kind("Prediction: Offensive\nRationale: x\nConfidence: high"),
            ParseFailureKind::ConfidenceUnparsable
        );
        assert_eq!(
            kind("Prediction: Offensive\nRationale: x\nConfidence: NaN"),
            ParseFailureKind::ConfidenceUnparsable
        );
        assert_eq!(
            kind("Prediction: Offensive\nRationale:\nConfidence: 0.7"),
            ParseFailureKind::MissingField
        );
    }

    #[test]
    fn rationale_cap_truncates() {
        let long = vec!["w"; 150].join(" ");
        let text = format!("Prediction: Offensive\nRationale: {long}\nConfidence: 0.8");
        let out = parse_output(&text, TaskKind::Offense).unwrap();
        assert_eq!(out.rationale.split_whitespace().count(), DEFAULT_RATIONALE_CAP);
    }

    #[test]
    fn model_distribution_branches() {
        let d = model_distribution(Label::Pos, 0.75).unwrap();
        assert_eq!((d.p_pos, d.p_neg), (0.75, 0.25));
        let d = model_distribution(Label::Neg, 0.75).unwrap();
        assert_eq!((d.p_pos, d.p_neg), (0.25, 0.75));
        let d = model_distribution(Label::Pos, 1.0).unwrap();
        assert_eq!((d.p_pos, d.p_neg), (1.0, 0.0));
        assert!(model_distribution(Label::Pos, 0.5).is_err());
        assert!(model_distribution(Label::Pos, 1.01).is_err());
    }

    #[test]
    fn serialize_target_contract() {
        let s = sample(TaskKind::Offense, None, 3, 2);
        let t = serialize_target(&s, s.agreement).unwrap();
        assert_eq!(
            t,
            "Prediction: Offensive\nRationale: The exaggerated reply mocks the greeting. However, some may read it as playful excitement.\nConfidence: 0.60"
        );
        let back = parse_output(&t, TaskKind::Offense).unwrap();
        assert_eq!(back.prediction, Label::Pos);
        assert_eq!(back.confidence, 0.6);

        let s = sample(TaskKind::Offense, None, 5, 0);
        assert!(serialize_target(&s, 1.0).unwrap().ends_with("Confidence: 1.00"));

        let mut s = sample(TaskKind::Offense, None, 1, 1);
        assert!(serialize_target(&s, s.agreement).unwrap().ends_with("Confidence: 0.51"));
        s.ref_rationale = None;
        assert!(matches!(
            serialize_target(&s, 0.7),
            Err(ProtocolError::MissingReferenceRationale(_))
        ));
    }

    #[test]
    fn prediction_only_parse() {
        assert_eq!(parse_prediction("Prediction: Normal", TaskKind::Sarcasm), Some(Label::Neg));
        assert_eq!(parse_prediction("nothing", TaskKind::Sarcasm), None);
    }
}
