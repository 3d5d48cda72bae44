//! Vocabulary construction and the shared tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on anything that is not a letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token <-> id bijection with PAD/BOS/EOS/UNK pinned to ids 0-3.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
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

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text))
    }

    pub fn decode_to_text(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }

    /// Fraction of tokens mapping to UNK.
    pub fn unk_rate(&self, corpus: &[Vec<String>]) -> f64 {
        let mut total = 0usize;
        let mut unk = 0usize;
        for sent in corpus {
            for tok in sent {
                total += 1;
                if self.id(tok) == UNK {
                    unk += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// Word list (ids 4..), one token per line; line number = id - 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens[4..].join("\n");
        fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        let words = body.lines().map(str::to_string).collect();
        Ok(Vocabulary::from_words(words))
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[4..]
    }

    pub fn from_word_list(words: Vec<String>) -> Self {
        Vocabulary::from_words(words)
    }
}

/// Builds a vocabulary from the training corpus: tokens seen fewer than
/// `min_count` times map to UNK; ids are assigned in descending frequency,
/// ties broken lexicographically.
pub fn build_vocab(corpus: &[Vec<String>], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sent in corpus {
        for tok in sent {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(Vocabulary::from_words(
        kept.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(sents: &[&str]) -> Vec<Vec<String>> {
        sents.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn min_count_filters_to_unk() {
        let v = build_vocab(&corpus(&["a a a", "b"]), 3).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = build_vocab(&corpus(&["c b a", "b c", "c"]), 1).unwrap();
        // frequency order: c(3), b(2), a(1)
        assert_eq!(v.id("c"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("a"), 6);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = build_vocab(&corpus(&["dog cat", "cat dog"]), 1).unwrap();
        assert_eq!(v.id("cat"), 4);
        assert_eq!(v.id("dog"), 5);
    }

    #[test]
    fn encode_decode_roundtrip_in_vocab() {
        let v = build_vocab(&corpus(&["the red circle moves"]), 1).unwrap();
        let toks = tokenize("the red circle moves");
        assert_eq!(v.decode(&v.encode(&toks)), toks);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(build_vocab(&[], 1).is_err());
        assert!(build_vocab(&[vec![]], 1).is_err());
    }

    #[test]
    fn specials_never_tokenized_from_text() {
        let toks = tokenize("<pad> <bos> <eos> <unk>");
        // punctuation splits the angle brackets away
        assert!(toks.iter().all(|t| !t.starts_with('<')));
    }

    #[test]
    fn bijection_and_ids() {
        let v = build_vocab(&corpus(&["x y z"]), 1).unwrap();
        assert_eq!(PAD, 0);
        assert_eq!(BOS, 1);
        assert_eq!(EOS, 2);
        assert_eq!(UNK, 3);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&corpus(&["red circle blue square"]), 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v.words(), loaded.words());
    }
}
