use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{
    AnnotatedSample, AnnotationCounts, DataError, RationalePair, RecordFault, Split, TaskKind,
};

const KNOWN_FIELDS: [&str; 7] = [
    "id",
    "task",
    "context",
    "text",
    "annotations",
    "rationale",
    "split",
];

/// Treatment of fields outside the record schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FieldPolicy {
    #[default]
    Strict,
    Lenient,
}

/// Load a line-delimited dataset file. Every record must belong to `task`.
pub fn load_dataset(
    path: &Path,
    task: TaskKind,
    policy: FieldPolicy,
) -> Result<Vec<AnnotatedSample>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(BufReader::new(file), Some(task), policy).map_err(|e| match e {
        DataError::Io { message, .. } => DataError::Io {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Parse records from a reader. When `task` is `None` the record's own task
/// field is trusted.
pub fn parse_dataset<R: BufRead>(
    reader: R,
    task: Option<TaskKind>,
    policy: FieldPolicy,
) -> Result<Vec<AnnotatedSample>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Io {
            path: String::new(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fault = |reason| DataError::MalformedRecord {
            line: line_no,
            reason,
        };
        let sample = parse_record(&line, task, policy).map_err(fault)?;
        if !seen.insert(sample.id.clone()) {
            return Err(fault(RecordFault::DuplicateId(sample.id)));
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(out)
}

fn parse_record(
    line: &str,
    task: Option<TaskKind>,
    policy: FieldPolicy,
) -> Result<AnnotatedSample, RecordFault> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| RecordFault::InvalidJson(e.to_string()))?;
    let obj = value.as_object().ok_or(RecordFault::WrongType {
        field: "<record>",
        expected: "an object",
    })?;
    if policy == FieldPolicy::Strict {
        if let Some(unknown) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
            return Err(RecordFault::UnknownField(unknown.clone()));
        }
    }

    let id = req_str(obj, "id")?;
    let task_name = req_str(obj, "task")?;
    let record_task =
        TaskKind::from_name(&task_name).ok_or_else(|| RecordFault::UnknownTask(task_name.clone()))?;
    if let Some(expected) = task {
        if expected != record_task {
            return Err(RecordFault::TaskMismatch {
                expected: expected.name().to_string(),
                found: task_name,
            });
        }
    }
    let context = opt_str(obj, "context")?;
    let text = req_str(obj, "text")?;

    let ann = obj
        .get("annotations")
        .ok_or(RecordFault::MissingField("annotations"))?
        .as_object()
        .ok_or(RecordFault::WrongType {
            field: "annotations",
            expected: "an object with integer `pos` and `neg`",
        })?;
    let pos = count_field(ann, "pos")?;
    let neg = count_field(ann, "neg")?;
    let counts = AnnotationCounts::new(pos, neg).map_err(|_| {
        RecordFault::CountInvariantViolated {
            pos: pos as u64,
            neg: neg as u64,
        }
    })?;

    let ref_rationale = match obj.get("rationale") {
        None | Some(Value::Null) => None,
        Some(Value::Object(r)) => {
            if policy == FieldPolicy::Strict {
                if let Some(unknown) = r
                    .keys()
                    .find(|k| *k != "label_justification" && *k != "disagreement_cue")
                {
                    return Err(RecordFault::UnknownField(format!("rationale.{unknown}")));
                }
            }
            Some(RationalePair {
                label_justification: req_str(r, "label_justification")?,
                disagreement_cue: req_str(r, "disagreement_cue")?,
            })
        }
        Some(_) => {
            return Err(RecordFault::WrongType {
                field: "rationale",
                expected: "an object or null",
            })
        }
    };

    let split = match req_str(obj, "split")?.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        _ => {
            return Err(RecordFault::WrongType {
                field: "split",
                expected: "\"train\" or \"test\"",
            })
        }
    };

    AnnotatedSample::new(id, record_task, context, text, counts, ref_rationale, split)
        .map_err(|_| RecordFault::CountInvariantViolated {
            pos: pos as u64,
            neg: neg as u64,
        })
}

fn req_str(obj: &Map<String, Value>, field: &'static str) -> Result<String, RecordFault> {
    match obj.get(field) {
        None => Err(RecordFault::MissingField(field)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(RecordFault::WrongType {
            field,
            expected: "a string",
        }),
    }
}

fn opt_str(obj: &Map<String, Value>, field: &'static str) -> Result<Option<String>, RecordFault> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(RecordFault::WrongType {
            field,
            expected: "a string or null",
        }),
    }
}

fn count_field(obj: &Map<String, Value>, field: &'static str) -> Result<u32, RecordFault> {
    let wrong = RecordFault::WrongType {
        field: if field == "pos" {
            "annotations.pos"
        } else {
            "annotations.neg"
        },
        expected: "a non-negative integer",
    };
    let v = obj
        .get(field)
        .ok_or(RecordFault::MissingField(if field == "pos" {
            "annotations.pos"
        } else {
            "annotations.neg"
        }))?;
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or(wrong)
}

fn record_value(s: &AnnotatedSample) -> Value {
    json!({
        "id": s.id,
        "task": s.task.name(),
        "context": s.context,
        "text": s.text,
        "annotations": { "pos": s.counts.pos, "neg": s.counts.neg },
        "rationale": s.ref_rationale.as_ref().map(|r| json!({
            "label_justification": r.label_justification,
            "disagreement_cue": r.disagreement_cue,
        })),
        "split": match s.split { Split::Train => "train", Split::Test => "test" },
    })
}

/// Canonical line-delimited form: one compact object per line, keys sorted.
pub fn serialize_dataset(samples: &[AnnotatedSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&record_value(s).to_string());
        out.push('\n');
    }
    out
}

/// Write atomically (temp file then rename).
pub fn write_dataset(path: &Path, samples: &[AnnotatedSample]) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(serialize_dataset(samples).as_bytes())
            .map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Label;

    fn parse(text: &str, policy: FieldPolicy) -> Result<Vec<AnnotatedSample>, DataError> {
        parse_dataset(text.as_bytes(), Some(TaskKind::Offense), policy)
    }

    const GOOD: &str = r#"{"id":"a","task":"offense","context":null,"text":"why so soy","annotations":{"pos":3,"neg":2},"rationale":{"label_justification":"It mocks","disagreement_cue":"could be humor"},"split":"train"}"#;

    #[test]
    fn loads_and_derives() {
        let s = &parse(GOOD, FieldPolicy::Strict).unwrap()[0];
        assert!((s.dist.p_pos - 0.6).abs() < 1e-12);
        assert!((s.agreement - 0.6).abs() < 1e-12);
        assert_eq!(s.majority_label, Label::Pos);
        assert!(s.ref_rationale.is_some());
    }

    #[test]
    fn unanimous_record() {
        let line = GOOD.replace(r#""pos":3,"neg":2"#, r#""pos":0,"neg":5"#);
        let s = &parse(&line, FieldPolicy::Strict).unwrap()[0];
        assert_eq!(s.agreement, 1.0);
        assert_eq!(s.majority_label, Label::Neg);
    }

    #[test]
    fn zero_counts_rejected_with_line() {
        let bad = GOOD
            .replace(r#""pos":3,"neg":2"#, r#""pos":0,"neg":0"#)
            .replace(r#""id":"a""#, r#""id":"b""#);
        let text = format!("{GOOD}\n{bad}\n");
        match parse(&text, FieldPolicy::Strict) {
            Err(DataError::MalformedRecord {
                line: 2,
                reason: RecordFault::CountInvariantViolated { pos: 0, neg: 0 },
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_strict_vs_lenient() {
        let extra = GOOD.replace(r#""split":"train""#, r#""split":"train","annotator_ids":[1,2]"#);
        assert!(matches!(
            parse(&extra, FieldPolicy::Strict),
            Err(DataError::MalformedRecord {
                reason: RecordFault::UnknownField(_),
                ..
            })
        ));
        assert_eq!(parse(&extra, FieldPolicy::Lenient).unwrap().len(), 1);
    }

    #[test]
    fn malformed_variants() {
        let cases = [
            ("not json", "invalid JSON"),
            (r#"{"id":"a"}"#, "missing field `task`"),
            (&GOOD.replace(r#""neg":2"#, r#""neg":-2"#), "non-negative"),
            (&GOOD.replace("\"offense\"", "\"sarcasm\""), "does not match"),
            (&GOOD.replace("\"train\"", "\"dev\""), "split"),
        ];
        for (line, needle) in cases {
            let err = parse(line, FieldPolicy::Strict).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} lacks {needle}");
            assert!(err.starts_with("line 1:"), "{err}");
        }
    }

    #[test]
    fn empty_and_duplicates() {
        assert_eq!(parse("\n\n", FieldPolicy::Strict), Err(DataError::EmptyDataset));
        let text = format!("{GOOD}\n{GOOD}\n");
        assert!(matches!(
            parse(&text, FieldPolicy::Strict),
            Err(DataError::MalformedRecord {
                line: 2,
                reason: RecordFault::DuplicateId(_)
            })
        ));
    }

    #[test]
    fn canonical_round_trip() {
        let samples = parse(GOOD, FieldPolicy::Strict).unwrap();
        let text = serialize_dataset(&samples);
        let again = parse(&text, FieldPolicy::Strict).unwrap();
        assert_eq!(samples, again);
        assert_eq!(serialize_dataset(&again), text);
    }
}
