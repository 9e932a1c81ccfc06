//! Token vocabulary with reserved control ids, plus caption encode/decode.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, strip `.,!?;:`, split on whitespace. Used identically for
/// vocabulary building, caption encoding, and metric computation so every
/// stage sees the same tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    min_count: usize,
}

/// Model-facing caption: starts with BOS, ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Scored steps: everything after BOS, including EOS.
    pub fn scored_len(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }
}

impl Vocabulary {
    /// Build from raw caption strings. `max_size` is the total size
    /// including the four reserved ids; surviving tokens appeared at least
    /// `min_count` times, ordered by descending frequency with ties broken
    /// lexicographically.
    pub fn build(captions: &[String], min_count: usize, max_size: usize) -> Result<Vocabulary> {
        if captions.is_empty() {
            return Err(Error::invalid("build_vocabulary: empty caption corpus"));
        }
        if min_count < 1 {
            return Err(Error::invalid("build_vocabulary: min_count must be >= 1"));
        }
        if max_size < RESERVED.len() {
            return Err(Error::invalid(
                "build_vocabulary: max_size must cover the 4 reserved tokens",
            ));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for caption in captions {
            for tok in tokenize(caption) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_token_list(tokens, min_count))
    }

    fn from_token_list(tokens: Vec<String>, min_count: usize) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            min_count,
        }
    }

    /// Rebuild from a serialized id→token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid(
                "vocabulary token list must start with <pad>, <bos>, <eos>, <unk>",
            ));
        }
        let vocab = Self::from_token_list(tokens, 1);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::invalid("vocabulary token list contains duplicates"));
        }
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// BOS + token ids (unknown words become UNK) + EOS, truncated to
    /// `max_len` total ids with EOS kept in the final position.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 3, "encode: max_len must be >= 3");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        for tok in tokenize(text) {
            ids.push(self.id(&tok).unwrap_or(UNK));
        }
        ids.push(EOS);
        if ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(EOS);
        }
        TokenSequence { ids }
    }

    /// Space-joined tokens, skipping control ids.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        for &id in &seq.ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(RESERVED[UNK]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn caps(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(&caps(&["a b c"]), 1, 100).unwrap();
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        // "a" appears twice, "b" once
        let v = Vocabulary::build(&caps(&["a a b"]), 2, 100).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn equal_counts_break_ties_lexicographically() {
        let v = Vocabulary::build(&caps(&["x y", "y x"]), 1, 100).unwrap();
        assert_eq!(v.id("x"), Some(4));
        assert_eq!(v.id("y"), Some(5));
    }

    #[test]
    fn frequency_orders_before_ties() {
        let v = Vocabulary::build(&caps(&["z z z", "m n"]), 1, 100).unwrap();
        assert_eq!(v.id("z"), Some(4));
        assert_eq!(v.id("m"), Some(5));
        assert_eq!(v.id("n"), Some(6));
    }

    #[test]
    fn max_size_truncates_after_ranking() {
        let v = Vocabulary::build(&caps(&["z z z", "m n"]), 1, 5).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("z"), Some(4));
        assert_eq!(v.id("m"), None);
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("A Red, square! sits."),
            vec!["a", "red", "square", "sits"]
        );
    }

    #[test]
    fn encode_decode_round_trip_for_in_vocab_text() {
        let v = Vocabulary::build(&caps(&["a red square above a blue circle"]), 1, 100).unwrap();
        let s = "a blue square above a red circle";
        let seq = v.encode(s, 20);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&seq), s);
    }

    #[test]
    fn unseen_words_become_unk() {
        let v = Vocabulary::build(&caps(&["a red square"]), 1, 100).unwrap();
        let seq = v.encode("a purple square", 20);
        assert_eq!(seq.ids[2], UNK);
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let v = Vocabulary::build(&caps(&["w1 w2 w3 w4 w5 w6 w7 w8 w9 w10"]), 1, 100).unwrap();
        let seq = v.encode("w1 w2 w3 w4 w5 w6 w7 w8 w9 w10", 5);
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(seq.ids[4], EOS);
        // BOS + first three words survive
        assert_eq!(seq.ids[1], v.id("w1").unwrap());
        assert_eq!(seq.ids[3], v.id("w3").unwrap());
    }

    #[test]
    fn identical_corpus_gives_identical_mapping() {
        let corpus = caps(&["red square", "blue circle", "red circle"]);
        let a = Vocabulary::build(&corpus, 1, 50).unwrap();
        let b = Vocabulary::build(&corpus, 1, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_list_round_trip() {
        let v = Vocabulary::build(&caps(&["a red square"]), 1, 100).unwrap();
        let rebuilt = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(rebuilt.id("red"), v.id("red"));
        assert_eq!(rebuilt.size(), v.size());
    }

    #[test]
    fn from_tokens_rejects_bad_prefix_and_duplicates() {
        assert!(Vocabulary::from_tokens(vec!["a".to_string()]).is_err());
        let mut toks: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        toks.push("dup".to_string());
        toks.push("dup".to_string());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocabulary::build(&[], 1, 100).is_err());
    }
}
