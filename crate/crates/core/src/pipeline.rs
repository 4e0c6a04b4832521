//! Glue between datasets and policies: vocabulary construction and dataset
//! fingerprints.

use sha2::{Digest, Sha256};

use crate::annotation::{serialize_dataset, AnnotatedSample, Split, TaskKind};
use crate::policy::Vocabulary;
use crate::protocol::{render_prompt, serialize_label_target, serialize_target};

pub const DEFAULT_VOCAB_SIZE: usize = 4096;

/// Vocabulary over every prompt, every train-split target and the label
/// surfaces of all tasks (so transfer evaluation can name any label).
pub fn build_vocabulary(datasets: &[&[AnnotatedSample]], max_size: usize) -> Vocabulary {
    let mut texts = vec![
        "Prediction: x\nRationale: x. However, x\nConfidence: 0.75".to_string(),
    ];
    for task in TaskKind::ALL {
        texts.push(format!("{} {}", task.pos_label(), task.neg_label()));
    }
    for samples in datasets {
        for s in samples.iter() {
            texts.push(render_prompt(s).text);
            if s.split == Split::Train {
                texts.push(serialize_label_target(s));
                if let Ok(t) = serialize_target(s, s.agreement) {
                    texts.push(t);
                }
            }
        }
    }
    Vocabulary::build(texts.iter().map(String::as_str), max_size)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical serialization.
pub fn dataset_digest(samples: &[AnnotatedSample]) -> String {
    content_digest(serialize_dataset(samples).as_bytes())
}
