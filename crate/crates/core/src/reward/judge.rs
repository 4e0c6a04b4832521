//! Rationale judges: a deterministic token-overlap judge for offline runs and
//! an HTTP client for a hosted judge model, with an on-disk response cache.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{normalize_likert, RewardError};

pub const JUDGE_URL_ENV: &str = "DPUA_JUDGE_URL";
pub const JUDGE_KEY_ENV: &str = "DPUA_JUDGE_KEY";

/// System prompt sent to chat-completion judges.
pub const JUDGE_SYSTEM_PROMPT: &str = include_str!("../../assets/judge_prompt.txt");

/// Likert scores for the two rationale aspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub s_lab_likert: u8,
    pub s_cue_likert: u8,
}

impl JudgeScores {
    pub fn new(s_lab_likert: i64, s_cue_likert: i64) -> Result<Self, RewardError> {
        normalize_likert(s_lab_likert)?;
        normalize_likert(s_cue_likert)?;
        Ok(Self {
            s_lab_likert: s_lab_likert as u8,
            s_cue_likert: s_cue_likert as u8,
        })
    }

    pub fn s_lab(&self) -> f64 {
        (self.s_lab_likert as f64 - 1.0) / 2.0
    }

    pub fn s_cue(&self) -> f64 {
        (self.s_cue_likert as f64 - 1.0) / 2.0
    }
}

/// Judge request in the native wire format.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub task: String,
    pub generated_rationale: String,
    pub reference_label_justification: String,
    pub reference_disagreement_cue: String,
}

impl JudgeRequest {
    /// Content hash used as the cache key.
    pub fn content_hash(&self, salt: &str) -> String {
        let body = json!({ "salt": salt, "request": self }).to_string();
        hex::encode(Sha256::digest(body.as_bytes()))
    }
}

pub trait Judge: Sync {
    fn score(&self, request: &JudgeRequest) -> Result<JudgeScores, RewardError>;

    /// Score several requests; implementations may overlap them.
    fn score_batch(&self, requests: &[JudgeRequest]) -> Vec<Result<JudgeScores, RewardError>> {
        requests.iter().map(|r| self.score(r)).collect()
    }
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9]+(?:'[a-z]+)?").unwrap())
}

fn bag(text: &str) -> HashMap<String, usize> {
    let lower = text.to_lowercase();
    let mut out = HashMap::new();
    for m in word_re().find_iter(&lower) {
        *out.entry(m.as_str().to_string()).or_insert(0) += 1;
    }
    out
}

/// Multiset token-overlap F1 between a candidate and a reference.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = bag(candidate);
    let r = bag(reference);
    let nc: usize = c.values().sum();
    let nr: usize = r.values().sum();
    if nc == 0 || nr == 0 {
        return 0.0;
    }
    let overlap: usize = c
        .iter()
        .map(|(w, n)| (*n).min(r.get(w).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / nc as f64;
    let rec = overlap as f64 / nr as f64;
    2.0 * p * rec / (p + rec)
}

/// Offline judge: F1 below `low` scores 1, below `high` scores 2, else 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockJudge {
    pub low: f64,
    pub high: f64,
}

impl Default for MockJudge {
    fn default() -> Self {
        Self {
            low: 0.2,
            high: 0.5,
        }
    }
}

impl MockJudge {
    fn likert(&self, f1: f64) -> u8 {
        if f1 < self.low {
            1
        } else if f1 < self.high {
            2
        } else {
            3
        }
    }
}

impl Judge for MockJudge {
    fn score(&self, request: &JudgeRequest) -> Result<JudgeScores, RewardError> {
        let lab = &request.reference_label_justification;
        let cue = &request.reference_disagreement_cue;
        if bag(lab).is_empty() || bag(cue).is_empty() {
            return Err(RewardError::EmptyReference);
        }
        Ok(JudgeScores {
            s_lab_likert: self.likert(token_f1(&request.generated_rationale, lab)),
            s_cue_likert: self.likert(token_f1(&request.generated_rationale, cue)),
        })
    }
}

/// Persistent judge cache: line-delimited `{key, s_lab, s_cue}` records.
/// Concurrent readers, serialized writers.
#[derive(Debug, Default)]
pub struct JudgeCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, JudgeScores>>,
    writer: Mutex<()>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    s_lab: u8,
    s_cue: u8,
}

impl JudgeCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or start) a cache file. Unreadable lines are skipped so a torn
    /// final write does not poison the cache.
    pub fn open(path: &Path) -> Result<Self, RewardError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path)
                .map_err(|e| RewardError::JudgeUnavailable(format!("cache {}: {e}", path.display())))?;
            for line in text.lines() {
                if let Ok(l) = serde_json::from_str::<CacheLine>(line) {
                    if let Ok(s) = JudgeScores::new(l.s_lab as i64, l.s_cue as i64) {
                        entries.insert(l.key, s);
                    }
                }
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn get(&self, key: &str) -> Option<JudgeScores> {
        self.entries.read().unwrap().get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: &str, scores: JudgeScores) -> Result<(), RewardError> {
        let _guard = self.writer.lock().unwrap();
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&CacheLine {
                key: key.to_string(),
                s_lab: scores.s_lab_likert,
                s_cue: scores.s_cue_likert,
            })
            .expect("cache line serializes");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| RewardError::JudgeUnavailable(format!("cache {}: {e}", path.display())))?;
            writeln!(f, "{line}")
                .map_err(|e| RewardError::JudgeUnavailable(format!("cache {}: {e}", path.display())))?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), scores);
        Ok(())
    }
}

/// HTTP POST of a JSON body returning a JSON reply.
pub trait Transport: Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, String>;
}

#[derive(Debug, Clone)]
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireFormat {
    /// POST the request object, expect `{s_lab, s_cue}` back.
    Native,
    /// OpenAI-style chat completion; scores are parsed from the reply text.
    ChatCompletion { model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteJudgeConfig {
    pub url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub wire: WireFormat,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    pub cache_path: Option<PathBuf>,
}

impl Default for RemoteJudgeConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            wire: WireFormat::ChatCompletion {
                model: "gpt-4o-mini".into(),
            },
            max_retries: 3,
            backoff_ms: 500,
            timeout_ms: 30_000,
            max_in_flight: 4,
            min_interval_ms: 0,
            cache_path: None,
        }
    }
}

impl RemoteJudgeConfig {
    /// Fill the endpoint and key from the environment when unset.
    pub fn with_env(mut self) -> Self {
        if self.url.is_empty() {
            if let Ok(url) = std::env::var(JUDGE_URL_ENV) {
                self.url = url;
            }
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(JUDGE_KEY_ENV).ok();
        }
        self
    }
}

pub struct RemoteJudge<T: Transport = UreqTransport> {
    cfg: RemoteJudgeConfig,
    transport: T,
    cache: JudgeCache,
    next_start: Mutex<Instant>,
}

impl RemoteJudge<UreqTransport> {
    pub fn new(cfg: RemoteJudgeConfig) -> Result<Self, RewardError> {
        let transport = UreqTransport::new(Duration::from_millis(cfg.timeout_ms));
        Self::with_transport(cfg, transport)
    }
}

fn scores_re() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            Regex::new(r"(?i)s_lab\W{0,3}\s*[:=]\s*(-?\d+)").unwrap(),
            Regex::new(r"(?i)s_cue\W{0,3}\s*[:=]\s*(-?\d+)").unwrap(),
        )
    })
}

/// Pull `s_lab: N` and `s_cue: N` out of free-form judge text.
pub(crate) fn parse_reply_text(text: &str) -> Result<JudgeScores, RewardError> {
    let (lab_re, cue_re) = scores_re();
    let grab = |re: &Regex| -> Result<i64, RewardError> {
        re.captures(text)
            .and_then(|c| c[1].parse().ok())
            .ok_or_else(|| RewardError::JudgeMalformedReply(text.to_string()))
    };
    let lab = grab(lab_re)?;
    let cue = grab(cue_re)?;
    JudgeScores::new(lab, cue).map_err(|_| RewardError::JudgeMalformedReply(text.to_string()))
}

impl<T: Transport> RemoteJudge<T> {
    pub fn with_transport(cfg: RemoteJudgeConfig, transport: T) -> Result<Self, RewardError> {
        if cfg.url.is_empty() {
            return Err(RewardError::JudgeUnavailable(format!(
                "no endpoint configured (set {JUDGE_URL_ENV})"
            )));
        }
        let cache = match &cfg.cache_path {
            Some(p) => JudgeCache::open(p)?,
            None => JudgeCache::in_memory(),
        };
        Ok(Self {
            cfg,
            transport,
            cache,
            next_start: Mutex::new(Instant::now()),
        })
    }

    pub fn cache(&self) -> &JudgeCache {
        &self.cache
    }

    fn body(&self, request: &JudgeRequest) -> Value {
        match &self.cfg.wire {
            WireFormat::Native => serde_json::to_value(request).expect("request serializes"),
            WireFormat::ChatCompletion { model } => {
                let user = format!(
                    "Task definition: {}\n\nGenerated rationale: {}\n\nReference label justification: {}\n\nReference disagreement cue: {}",
                    request.task,
                    request.generated_rationale,
                    request.reference_label_justification,
                    request.reference_disagreement_cue
                );
                json!({
                    "model": model,
                    "temperature": 0,
                    "messages": [
                        { "role": "system", "content": JUDGE_SYSTEM_PROMPT },
                        { "role": "user", "content": user },
                    ],
                })
            }
        }
    }

    fn parse_reply(&self, reply: &Value) -> Result<JudgeScores, RewardError> {
        let malformed = || RewardError::JudgeMalformedReply(reply.to_string());
        match &self.cfg.wire {
            WireFormat::Native => {
                let lab = reply.get("s_lab").and_then(Value::as_i64).ok_or_else(malformed)?;
                let cue = reply.get("s_cue").and_then(Value::as_i64).ok_or_else(malformed)?;
                JudgeScores::new(lab, cue).map_err(|_| malformed())
            }
            WireFormat::ChatCompletion { .. } => {
                let text = reply
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(malformed)?;
                parse_reply_text(text)
            }
        }
    }

    fn wait_turn(&self) {
        if self.cfg.min_interval_ms == 0 {
            return;
        }
        let start = {
            let mut next = self.next_start.lock().unwrap();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + Duration::from_millis(self.cfg.min_interval_ms);
            start
        };
        let now = Instant::now();
        if start > now {
            thread::sleep(start - now);
        }
    }

    fn salt(&self) -> String {
        let wire = serde_json::to_string(&self.cfg.wire).expect("wire serializes");
        format!("{wire}|{}", hex::encode(Sha256::digest(JUDGE_SYSTEM_PROMPT.as_bytes())))
    }
}

impl<T: Transport> Judge for RemoteJudge<T> {
    fn score(&self, request: &JudgeRequest) -> Result<JudgeScores, RewardError> {
        let key = request.content_hash(&self.salt());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let body = self.body(request);
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            self.wait_turn();
            match self
                .transport
                .post_json(&self.cfg.url, self.cfg.api_key.as_deref(), &body)
            {
                Ok(reply) => {
                    let scores = self.parse_reply(&reply)?;
                    self.cache.insert(&key, scores)?;
                    return Ok(scores);
                }
                Err(e) => last_err = e,
            }
        }
        Err(RewardError::JudgeUnavailable(format!(
            "{} attempts failed; last error: {last_err}",
            self.cfg.max_retries + 1
        )))
    }

    fn score_batch(&self, requests: &[JudgeRequest]) -> Vec<Result<JudgeScores, RewardError>> {
        let width = self.cfg.max_in_flight.max(1);
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(width) {
            let results: Vec<_> = thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|r| s.spawn(move || self.score(r)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("judge worker panicked"))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}
