//! Tokenization and vocabulary.
//!
//! CJK characters are one token each; any other run of non-whitespace
//! characters is one token. This keeps Chinese consultation text and the
//! Latin synthetic corpus on the same code path.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const PATIENT: usize = 5;
pub const DOCTOR: usize = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[UNK]", "[PATIENT]", "[DOCTOR]"];

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2A6DF)
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_cjk(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if is_cjk(c) {
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn is_cjk_token(t: &str) -> bool {
    let mut chars = t.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if is_cjk(c))
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_cjk = true;
    for t in tokens {
        let t = t.as_ref();
        let cjk = is_cjk_token(t);
        if !out.is_empty() && !cjk && !prev_cjk {
            out.push(' ');
        }
        out.push_str(t);
        prev_cjk = cjk;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then corpus tokens by descending frequency, ties lexicographic.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> =
            counts.into_iter().filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str())).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(entries.into_iter().map(|(t, _)| t)).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Drops special tokens and joins the rest.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().filter(|&&i| i >= SPECIAL_TOKENS.len()).map(|&i| self.token(i)).collect();
        detokenize(&toks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cjk_is_split_per_character_and_latin_per_word() {
        assert_eq!(tokenize("慢性胃炎 and fever"), vec!["慢", "性", "胃", "炎", "and", "fever"]);
        assert_eq!(tokenize("ab胃cd"), vec!["ab", "胃", "cd"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn detokenize_round_trips_normalized_text() {
        for s in ["慢性胃炎 and fever", "a b c", "胃 ok 炎"] {
            let t = tokenize(s);
            assert_eq!(tokenize(&detokenize(&t)), t);
        }
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let v = Vocab::build(["b a", "a c", "c"]);
        assert_eq!(&v.tokens()[SPECIAL_TOKENS.len()..], &["a", "c", "b"]);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[BOS, v.id("a"), SEP, v.id("b")]), "a b");
    }
}
