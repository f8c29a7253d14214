//! Word-level vocabulary for instructions and label strings.
//!
//! Text is lowercased and split into alphabetic words, single digits and single
//! punctuation characters. Splitting numerals into digits keeps the vocabulary
//! small while letting the decoder spell out any regression label.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Tokens that always occupy the first ids, in this order.
const RESERVED: [&str; 17] = [
    PAD_TOKEN, EOS_TOKEN, UNK_TOKEN, "yes", "no", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-",
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary corpus is empty")]
    EmptyCorpus,
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Splits text into lowercase word, digit and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphabetic() || c == '_' {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn is_numeric_piece(token: &str) -> bool {
    matches!(token, "." | "-") || (token.len() == 1 && token.as_bytes()[0].is_ascii_digit())
}

impl Vocab {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut extra: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        extra.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(extra.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(VocabError::Malformed(format!("id {i} must be {r:?}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
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

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn yes_id(&self) -> u32 {
        3
    }

    pub fn no_id(&self) -> u32 {
        4
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins tokens up to the first EOS. Numeric pieces (digits, `.`, `-`) are
    /// glued to each other; every other boundary gets one space.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_numeric = false;
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK_TOKEN);
            let numeric = is_numeric_piece(tok);
            if !out.is_empty() && !(numeric && prev_numeric) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_numeric = numeric;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("string list serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabError> {
        let tokens: Vec<String> = serde_json::from_str(s).map_err(|e| VocabError::Malformed(e.to_string()))?;
        Self::from_tokens(tokens)
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squash(s: &str) -> String {
        s.chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .collect()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::build(&["Yes No"]).unwrap();
        assert_eq!(v.id("Yes"), v.yes_id());
        assert_eq!(v.id("No"), v.no_id());
        assert_eq!(v.token(PAD), Some(PAD_TOKEN));
        assert_eq!(v.token(EOS), Some(EOS_TOKEN));
        assert_eq!(v.token(UNK), Some(UNK_TOKEN));
        assert_eq!(v.len(), RESERVED.len());
    }

    #[test]
    fn build_is_deterministic_and_frequency_ordered() {
        let corpus = ["the ring the ring atom", "is there a ring"];
        let a = Vocab::build(&corpus).unwrap();
        let b = Vocab::build(&corpus).unwrap();
        assert_eq!(a, b);
        let extra: Vec<&str> = a.tokens()[RESERVED.len()..].iter().map(String::as_str).collect();
        assert_eq!(extra, vec!["ring", "the", "a", "atom", "is", "there"]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(&["ring"]).unwrap();
        assert_eq!(v.encode("benzene"), vec![UNK]);
    }

    #[test]
    fn numerals_split_into_digits() {
        let v = Vocab::build(&["x"]).unwrap();
        assert_eq!(v.encode("5.10"), vec![v.id("5"), v.id("."), v.id("1"), v.id("0")]);
        assert_eq!(v.decode(&v.encode("5.10")), "5.10");
        assert_eq!(v.decode(&v.encode("-3.21")), "-3.21");
    }

    #[test]
    fn yes_round_trip_and_empty() {
        let v = Vocab::build(&["x"]).unwrap();
        assert_eq!(v.encode("Yes"), vec![v.yes_id()]);
        assert_eq!(v.decode(&v.encode("Yes")), "yes");
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]), "");
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocab::build(&["x"]).unwrap();
        assert_eq!(v.decode(&[v.id("7"), EOS, v.id("3")]), "7");
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(&["does the molecule contain a ring ?"]).unwrap();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocab::from_json(r#"["a","b"]"#).is_err());
    }

    #[test]
    fn round_trip_modulo_case_and_whitespace() {
        let corpus = [
            "Does the molecule contain at least 10 heavy atoms?",
            "Is the  ring count 2.5 -- or not.",
        ];
        let v = Vocab::build(&corpus).unwrap();
        for text in corpus {
            assert_eq!(squash(&v.decode(&v.encode(text))), squash(text));
        }
    }
}
