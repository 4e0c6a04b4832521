//! Split a tokenized target into label, rationale and confidence segments.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, EOS, NEWLINE};
use super::PolicyError;

/// Half-open token ranges. Together they partition the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpans {
    pub label: Range<usize>,
    pub rationale: Range<usize>,
    pub confidence: Range<usize>,
}

fn field_header(vocab: &Vocabulary, name: &str) -> Result<[TokenId; 3], PolicyError> {
    let get = |t: &str| {
        vocab
            .lookup(t)
            .ok_or_else(|| PolicyError::MalformedTarget(format!("vocabulary lacks `{t}`")))
    };
    Ok([get(NEWLINE)?, get(name)?, get(":")?])
}

/// Locate the three segments. The label segment runs from `Prediction` up to
/// the newline before `Rationale:`; the rationale segment runs from that
/// newline to the newline before the last `Confidence:`; the remainder,
/// including `<eos>`, is the confidence segment.
pub fn segment_spans(tokens: &[TokenId], vocab: &Vocabulary) -> Result<SegmentSpans, PolicyError> {
    let pred = vocab.lookup("Prediction");
    let colon = vocab.lookup(":");
    if tokens.len() < 2 || Some(tokens[0]) != pred || Some(tokens[1]) != colon {
        return Err(PolicyError::MalformedTarget(
            "target does not start with `Prediction:`".into(),
        ));
    }
    let rat = field_header(vocab, "Rationale")?;
    let conf = field_header(vocab, "Confidence")?;
    let rat_at = tokens
        .windows(3)
        .position(|w| w == rat)
        .ok_or_else(|| PolicyError::MalformedTarget("missing `Rationale:` field".into()))?;
    let conf_at = tokens
        .windows(3)
        .rposition(|w| w == conf)
        .filter(|&j| j > rat_at)
        .ok_or_else(|| PolicyError::MalformedTarget("missing `Confidence:` field".into()))?;
    if tokens[conf_at + 3..].iter().all(|&t| t == EOS) {
        return Err(PolicyError::MalformedTarget("empty confidence value".into()));
    }
    Ok(SegmentSpans {
        label: 0..rat_at,
        rationale: rat_at..conf_at,
        confidence: conf_at..tokens.len(),
    })
}

/// Spans for a label-only target: everything belongs to the label segment.
pub fn label_segments(tokens: &[TokenId]) -> SegmentSpans {
    SegmentSpans {
        label: 0..tokens.len(),
        rationale: tokens.len()..tokens.len(),
        confidence: tokens.len()..tokens.len(),
    }
}
