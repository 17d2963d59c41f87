//! Report normalisation and the token vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, replaces every character outside `[a-z0-9]` with a space and
/// collapses runs of spaces.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

pub fn tokenize(s: &str) -> Vec<String> {
    normalize(s).split(' ').filter(|t| !t.is_empty()).map(ToString::to_string).collect()
}

/// Token <-> id map with the four special tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency with lexicographic tie-breaks.
    pub fn build(reports: &[Vec<String>], min_freq: usize) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in reports {
            for t in r {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary from corpus tokens in id order (specials are prepended).
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in SPECIALS {
            v.index.insert(s.to_string(), v.tokens.len());
            v.tokens.push(s.to_string());
        }
        for t in tokens {
            if t.is_empty() || normalize(t) != t {
                return Err(Error::contract(alloc::format!("`{t}` is not a normalised token")));
            }
            if v.index.insert(t.to_string(), v.tokens.len()).is_some() {
                return Err(Error::contract(alloc::format!("duplicate token `{t}`")));
            }
            v.tokens.push(t.to_string());
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Corpus tokens in id order, without the specials.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Joins ids with single spaces, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(SPECIALS[UNK]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalisation() {
        assert_eq!(normalize("  No acute  Cardio-pulmonary process.  "), "no acute cardio pulmonary process");
        assert_eq!(tokenize("A, b;C"), vec!["a", "b", "c"]);
        assert!(tokenize("...").is_empty());
    }

    #[test]
    fn cutoff_boundary() {
        let corpus = vec![tokenize("a a a b")];
        let v = Vocab::build(&corpus, 2).unwrap();
        assert_eq!(v.corpus_tokens(), &["a"]);
        assert_eq!(v.id("b"), UNK);
        let v = Vocab::build(&corpus, 1).unwrap();
        assert_eq!(v.corpus_tokens(), &["a", "b"]);
        assert!(Vocab::build(&[], 5).is_err());
    }

    #[test]
    fn fixture_token_table() {
        let corpus: Vec<Vec<String>> = [
            "The heart is normal. Lungs are clear.",
            "Heart size normal; no effusion.",
            "Lungs clear. No pneumothorax!",
            "the HEART is enlarged",
        ]
        .iter()
        .map(|s| tokenize(s))
        .collect();
        // heart 3; clear, is, lungs, no, normal, the 2; the rest 1
        let v = Vocab::build(&corpus, 2).unwrap();
        assert_eq!(v.corpus_tokens(), &["heart", "clear", "is", "lungs", "no", "normal", "the"]);
        assert_eq!(&v.tokens[..4], &SPECIALS);
        assert_eq!(v.id("heart"), 4);
        assert_eq!(v.id("effusion"), UNK);
    }

    #[test]
    fn decode_skips_control_tokens() {
        let v = Vocab::from_tokens(["x", "y"]).unwrap();
        assert_eq!(v.decode(&[BOS, 4, 5, UNK, EOS, PAD]), "x y <unk>");
        assert!(Vocab::from_tokens(["X"]).is_err());
    }
}
