// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearizer::LinearizedEvent;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const SPECIALS: [&str; 2] = ["[PAD]", "[UNK]"];

/// Whitespace vocabulary with dense ids; `[PAD]` = 0, `[UNK]` = 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a LinearizedEvent>,
    {
        Self::build_from_texts(corpus.into_iter().map(|e| e.text.as_str()), max_size)
    }

    pub fn build_from_texts<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary needs room for the two special tokens, max_size = {max_size}"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - 2).map(|(t, _)| t.to_owned()))
            .collect::<Vec<_>>();
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace split, id lookup with `[UNK]` fallback, truncated or padded
    /// with `[PAD]` to exactly `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = text
            .split_whitespace()
            .take(max_len)
            .map(|t| self.id(t))
            .collect();
        ids.resize(max_len, PAD);
        ids
    }
}

pub fn tokenize(event: &LinearizedEvent, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    vocab.tokenize(&event.text, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: &str) -> LinearizedEvent {
        LinearizedEvent {
            text: t.into(),
            source_event_index: 0,
        }
    }

    #[test]
    fn frequency_order_with_lexicographic_ties() {
        let corpus = [ev("a b"), ev("a c")];
        let v = Vocabulary::build(&corpus, 10).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("c"), 4);
    }

    #[test]
    fn truncates_to_max_size() {
        let corpus = [ev("a b"), ev("a c")];
        let v = Vocabulary::build(&corpus, 3).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), UNK);
        assert!(Vocabulary::build(&corpus, 1).is_err());
        assert!(Vocabulary::build(&[], 10).is_err());
    }

    #[test]
    fn order_of_corpus_does_not_matter() {
        let a = [ev("x y z"), ev("y z"), ev("z q")];
        let b = [ev("z q"), ev("x y z"), ev("y z")];
        assert_eq!(Vocabulary::build(&a, 50).unwrap(), Vocabulary::build(&b, 50).unwrap());
    }

    #[test]
    fn tokenize_pads_truncates_and_falls_back() {
        let v = Vocabulary::build(&[ev("labevents itemid Glucose")], 10).unwrap();
        let ids = tokenize(&ev("labevents itemid Glucose"), &v, 5);
        assert_eq!(ids.len(), 5);
        assert!(ids[..3].iter().all(|&i| i > UNK));
        assert_eq!(&ids[3..], &[PAD, PAD]);
        assert_eq!(v.tokenize("labevents Lactate", 3), vec![v.id("labevents"), UNK, PAD]);
        assert_eq!(v.tokenize("labevents itemid Glucose", 2), ids[..2].to_vec());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(&[ev("a b b")], 10).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }
}
