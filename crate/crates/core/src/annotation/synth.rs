//! Seeded generator for small corpora whose disagreement structure is known.
//!
//! Every text carries one polarity cue word that fixes the intended label and
//! one marker word that fixes the intended agreement level: a hedge for
//! buckets with disagreement, a certainty word for unanimous ones. A bucket
//! may leave its markers empty only when it is unanimous. Reference
//! rationales name both words.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, AnnotationCounts, DataError, Label, RationalePair, Split, TaskKind};

/// One agreement level: vote split plus the marker words that signal it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityBucket {
    pub name: String,
    pub majority_votes: u32,
    pub minority_votes: u32,
    /// Hedges when the bucket has disagreement, certainty words otherwise.
    pub markers: Vec<String>,
    pub weight: f64,
}

impl AmbiguityBucket {
    pub fn new(name: &str, majority: u32, minority: u32, markers: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            majority_votes: majority,
            minority_votes: minority,
            markers: markers.iter().map(|s| s.to_string()).collect(),
            weight: 1.0,
        }
    }

    pub fn agreement(&self) -> f64 {
        let total = (self.majority_votes + self.minority_votes) as f64;
        self.majority_votes.max(self.minority_votes) as f64 / total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub task: TaskKind,
    pub buckets: Vec<AmbiguityBucket>,
    pub pos_cues: Vec<String>,
    pub neg_cues: Vec<String>,
    pub subjects: Vec<String>,
    pub frames: Vec<String>,
    pub contexts: Vec<String>,
    pub test_fraction: f64,
    pub with_rationales: bool,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl SynthProfile {
    /// Three agreement levels (5/0, 4/1, 3/2) with task-specific cue words.
    pub fn desk(task: TaskKind) -> Self {
        let (pos, neg): (&[&str], &[&str]) = match task {
            TaskKind::Offense => (
                &["vile", "pathetic", "idiotic", "worthless", "disgusting", "clownish"],
                &["kind", "thoughtful", "decent", "helpful", "polite", "gentle"],
            ),
            TaskKind::Sentiment => (
                &["wonderful", "delightful", "joyful", "lovely", "amazing", "cheerful"],
                &["awful", "miserable", "gloomy", "dreadful", "bitter", "painful"],
            ),
            TaskKind::Sarcasm => (
                &["sooo", "obviously", "totally", "genius", "wowww", "fantastic"],
                &["sincerely", "plainly", "calmly", "truly", "simply", "honestly"],
            ),
        };
        Self {
            task,
            buckets: vec![
                AmbiguityBucket::new("unanimous", 5, 0, &["clearly", "definitely", "absolutely"]),
                AmbiguityBucket::new("moderate-4/1", 4, 1, &["perhaps", "arguably", "somewhat"]),
                AmbiguityBucket::new("split-3/2", 3, 2, &["supposedly", "jokingly", "kinda"]),
            ],
            pos_cues: strings(pos),
            neg_cues: strings(neg),
            subjects: strings(&[
                "the mayor",
                "my neighbor",
                "this movie",
                "that reply",
                "the coach",
                "our teacher",
                "the waiter",
                "his post",
            ]),
            frames: strings(&[
                "{subject} is {marker} {cue} today",
                "frankly {subject} looks {marker} {cue}",
                "i think {subject} was {marker} {cue}",
                "{subject} sounded {marker} {cue} again",
            ]),
            contexts: strings(&[
                "you walk into the room and steve says hi",
                "my friend asked how the exam went",
                "the bus arrived forty minutes late",
                "someone spilled coffee on the report",
            ]),
            test_fraction: 1.0 / 3.0,
            with_rationales: true,
        }
    }

    fn validate(&self, n: usize) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidProfile(m.to_string()));
        if n == 0 {
            return bad("n must be at least 1");
        }
        if self.buckets.is_empty() {
            return bad("at least one bucket is required");
        }
        for b in &self.buckets {
            if b.majority_votes == 0 || b.majority_votes < b.minority_votes {
                return bad(&format!("bucket `{}` needs majority_votes >= max(1, minority_votes)", b.name));
            }
            if b.minority_votes > 0 && b.markers.is_empty() {
                return bad(&format!("bucket `{}` has disagreement but no marker words", b.name));
            }
            if !(b.weight.is_finite() && b.weight > 0.0) {
                return bad(&format!("bucket `{}` weight must be positive", b.name));
            }
        }
        if self.pos_cues.is_empty() || self.neg_cues.is_empty() {
            return bad("both cue lists must be non-empty");
        }
        if self.subjects.is_empty() || self.frames.is_empty() {
            return bad("subjects and frames must be non-empty");
        }
        if self.task.has_context() && self.contexts.is_empty() {
            return bad("task needs contexts");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` samples to buckets by weight.
fn bucket_quotas(buckets: &[AmbiguityBucket], n: usize) -> Vec<usize> {
    let total: f64 = buckets.iter().map(|b| b.weight).sum();
    let exact: Vec<f64> = buckets.iter().map(|b| b.weight / total * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..buckets.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        quotas[i] += 1;
        rest -= 1;
    }
    quotas
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> &'a str {
    &items[rng.gen_range(0..items.len())]
}

/// Generate `n` samples; output is a pure function of `(n, profile, seed)`.
pub fn generate_synthetic(
    n: usize,
    profile: &SynthProfile,
    seed: u64,
) -> Result<Vec<AnnotatedSample>, DataError> {
    profile.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut assignment: Vec<usize> = bucket_quotas(&profile.buckets, n)
        .into_iter()
        .enumerate()
        .flat_map(|(i, q)| std::iter::repeat_n(i, q))
        .collect();
    assignment.shuffle(&mut rng);

    let n_test = (n as f64 * profile.test_fraction).round() as usize;
    let mut is_test = vec![false; n];
    is_test[..n_test].iter_mut().for_each(|t| *t = true);
    is_test.shuffle(&mut rng);

    let task = profile.task;
    let mut samples = Vec::with_capacity(n);
    for (i, &b) in assignment.iter().enumerate() {
        let bucket = &profile.buckets[b];
        let polarity = if rng.gen_bool(0.5) { Label::Pos } else { Label::Neg };
        let cue = pick(
            &mut rng,
            match polarity {
                Label::Pos => &profile.pos_cues,
                Label::Neg => &profile.neg_cues,
            },
        )
        .to_string();
        let marker = if bucket.markers.is_empty() {
            None
        } else {
            Some(pick(&mut rng, &bucket.markers).to_string())
        };
        let subject = pick(&mut rng, &profile.subjects);
        let frame = pick(&mut rng, &profile.frames);
        let text = frame
            .replace("{subject}", subject)
            .replace("{marker}", marker.as_deref().unwrap_or(""))
            .replace("{cue}", &cue)
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let context = task
            .has_context()
            .then(|| pick(&mut rng, &profile.contexts).to_string());

        let (pos, neg) = match polarity {
            Label::Pos => (bucket.majority_votes, bucket.minority_votes),
            Label::Neg => (bucket.minority_votes, bucket.majority_votes),
        };
        let counts = AnnotationCounts::new(pos, neg)?;
        let majority = if pos == neg { Label::Neg } else { polarity };
        let rationale = profile
            .with_rationales
            .then(|| reference_rationale(task, majority, &cue, marker.as_deref(), bucket.minority_votes > 0));
        let split = if is_test[i] { Split::Test } else { Split::Train };
        samples.push(AnnotatedSample::new(
            format!("{}-{seed}-{i:05}", task.name()),
            task,
            context,
            text,
            counts,
            rationale,
            split,
        )?);
    }
    Ok(samples)
}

fn reference_rationale(
    task: TaskKind,
    label: Label,
    cue: &str,
    marker: Option<&str>,
    ambiguous: bool,
) -> RationalePair {
    let surface = task.surface(label).to_lowercase();
    let label_justification =
        format!("The text reads as {surface} because the word {cue} carries that tone.");
    let disagreement_cue = match (marker, ambiguous) {
        (Some(h), true) => format!("the word {h} makes the tone ambiguous, so annotators may disagree."),
        (Some(h), false) => format!("the word {h} leaves little doubt, so annotators are unlikely to disagree."),
        (None, _) => "the wording is direct, so annotators are unlikely to disagree.".to_string(),
    };
    RationalePair {
        label_justification,
        disagreement_cue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::serialize_dataset;

    #[test]
    fn two_bucket_example() {
        let mut profile = SynthProfile::desk(TaskKind::Offense);
        profile.buckets = vec![
            AmbiguityBucket::new("unanimous", 5, 0, &[]),
            AmbiguityBucket::new("split-3/2", 3, 2, &["supposedly"]),
        ];
        let samples = generate_synthetic(4, &profile, 7).unwrap();
        assert_eq!(samples.len(), 4);
        let ones = samples.iter().filter(|s| s.agreement == 1.0).count();
        let sixes = samples
            .iter()
            .filter(|s| (s.agreement - 0.6).abs() < 1e-12)
            .count();
        assert_eq!((ones, sixes), (2, 2));
    }

    #[test]
    fn deterministic_bytes() {
        let profile = SynthProfile::desk(TaskKind::Sarcasm);
        let a = serialize_dataset(&generate_synthetic(50, &profile, 11).unwrap());
        let b = serialize_dataset(&generate_synthetic(50, &profile, 11).unwrap());
        assert_eq!(a, b);
        let c = serialize_dataset(&generate_synthetic(50, &profile, 12).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn zero_samples_rejected() {
        let profile = SynthProfile::desk(TaskKind::Offense);
        assert!(matches!(
            generate_synthetic(0, &profile, 1),
            Err(DataError::InvalidProfile(_))
        ));
    }

    #[test]
    fn cues_fix_labels_and_rationales_name_words() {
        let profile = SynthProfile::desk(TaskKind::Offense);
        for s in generate_synthetic(60, &profile, 3).unwrap() {
            let words: Vec<&str> = s.text.split_whitespace().collect();
            let cue_list = match s.majority_label {
                Label::Pos => &profile.pos_cues,
                Label::Neg => &profile.neg_cues,
            };
            let cue = cue_list.iter().find(|c| words.contains(&c.as_str())).unwrap();
            let r = s.ref_rationale.as_ref().unwrap();
            assert!(r.label_justification.contains(cue.as_str()));
            let marker = profile
                .buckets
                .iter()
                .flat_map(|b| b.markers.iter())
                .find(|h| words.contains(&h.as_str()))
                .unwrap();
            assert!(r.disagreement_cue.contains(marker.as_str()));
            assert_eq!(r.disagreement_cue.contains("may disagree"), !s.is_unanimous());
        }
    }

    #[test]
    fn split_fraction() {
        let profile = SynthProfile::desk(TaskKind::Sentiment);
        let samples = generate_synthetic(768, &profile, 5).unwrap();
        let test = samples.iter().filter(|s| s.split == Split::Test).count();
        assert_eq!(test, 256);
        assert!(samples.iter().all(|s| s.context.is_none()));
    }
}
