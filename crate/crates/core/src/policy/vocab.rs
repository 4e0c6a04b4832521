//! Word-level tokenization with an unknown-token fallback.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Newline is a token of its own so field boundaries survive tokenization.
pub const NEWLINE: &str = "\n";

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\n|\d+\.\d+|[A-Za-z0-9]+(?:['-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]").unwrap()
    })
}

/// Split text into word, number and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    token_re().find_iter(text).map(|m| m.as_str()).collect()
}

/// Every two-decimal confidence literal in (0.5, 1.0].
pub fn confidence_literals() -> Vec<String> {
    (51..=100).map(|c| format!("{:.2}", c as f64 / 100.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Build from a corpus: special tokens, all confidence literals, then
    /// corpus tokens by descending frequency (ties broken lexically), capped at
    /// `max_size` entries in total.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(confidence_literals());
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !tokens.iter().any(|x| x == t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Prompt ids, always starting with `<bos>` so the prompt is never empty.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids
    }

    /// Target ids terminated by `<eos>`.
    pub fn encode_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Join tokens back into text. Special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            let attach = matches!(tok, "." | "," | ":" | ";" | "!" | "?" | ")" | "]" | NEWLINE);
            if !(glue_next || attach) {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = matches!(tok, "(" | "[" | NEWLINE);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_fields_and_numbers() {
        let toks = tokenize("Prediction: Non-offensive\nConfidence: 0.60");
        assert_eq!(
            toks,
            vec!["Prediction", ":", "Non-offensive", "\n", "Confidence", ":", "0.60"]
        );
    }

    #[test]
    fn decode_restores_target_layout() {
        let text = "Prediction: Offensive\nRationale: The word vile carries that tone. However, the word perhaps adds doubt.\nConfidence: 0.80";
        let vocab = Vocabulary::build([text], 1000);
        let ids = vocab.encode_target(text);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(vocab.decode(&ids), text);
    }

    #[test]
    fn unknown_tokens_fall_back() {
        let vocab = Vocabulary::build(["alpha beta"], 100);
        assert_eq!(vocab.encode("alpha gamma"), vec![vocab.id("alpha"), UNK]);
        assert!(vocab.lookup("0.75").is_some());
        assert_eq!(vocab.encode_prompt("")[0], BOS);
    }

    #[test]
    fn build_is_capped_and_ordered() {
        let vocab = Vocabulary::build(["b b b a a c"], SPECIALS.len() + 50 + 2);
        assert_eq!(vocab.len(), 55);
        assert_eq!(vocab.token(53), Some("b"));
        assert_eq!(vocab.token(54), Some("a"));
    }

    #[test]
    fn serde_as_token_list() {
        let vocab = Vocabulary::build(["x y"], 100);
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(vocab, back);
    }
}
