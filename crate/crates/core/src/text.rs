//! Tokenization, the shared vocabulary, and sentence-pair construction.
//!
//! The captioner and the language encoder share one vocabulary, so a decoded
//! image description is already a valid token sequence for the encoder. The
//! auxiliary sentence (target tokens followed by description tokens) enters
//! the encoder as sentence B of a pair encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Token ids; always valid indices into the vocabulary that produced them.
pub type TokenSequence = Vec<usize>;

/// Bijective token <-> id map with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from the full token list including the four reserved tokens at
    /// ids 0..4. Rejects duplicates and misplaced reserved tokens.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 5 tokens, got {}",
                tokens.len()
            )));
        }
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Config(format!(
                    "vocabulary line {i} must be {expected}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Convenience constructor prepending the reserved tokens.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::new(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of size {}", self.size())))
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Self::new(tokens)
    }
}

/// Lowercase, split on whitespace and punctuation boundaries, map unknown
/// words to [UNK]. Punctuation characters become single-character tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::new();
    let lower = text.to_lowercase();
    let mut word = String::new();
    let flush = |w: &mut String, ids: &mut Vec<usize>| {
        if !w.is_empty() {
            ids.push(vocab.id(w).unwrap_or(UNK_ID));
            w.clear();
        }
    };
    for c in lower.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut ids);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut ids);
            ids.push(vocab.id(&c.to_string()).unwrap_or(UNK_ID));
        }
    }
    flush(&mut word, &mut ids);
    ids
}

/// Space-joined rendering; [PAD] is stripped, other special tokens render
/// literally. Errors on ids outside the vocabulary.
pub fn detokenize(seq: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::with_capacity(seq.len());
    for &id in seq {
        let tok = vocab.token(id)?;
        if id != PAD_ID {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

/// Target tokens followed by image-description tokens, no delimiter between
/// them. Target must be non-empty.
pub fn build_aux_sentence(target: &[usize], caption: &[usize]) -> Result<TokenSequence> {
    if target.is_empty() {
        return Err(Error::Contract("auxiliary sentence requires a non-empty target".into()));
    }
    let mut out = Vec::with_capacity(target.len() + caption.len());
    out.extend_from_slice(target);
    out.extend_from_slice(caption);
    Ok(out)
}

/// Fixed-length sentence-pair encoding:
/// `[CLS] a [SEP] b [SEP] [PAD]...`
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePairEncoding {
    /// Token ids, length exactly l.
    pub ids: Vec<usize>,
    /// 0 over [CLS] a [SEP], 1 over b [SEP], 0 over padding.
    pub segments: Vec<u8>,
    /// 1 for real tokens, 0 for padding.
    pub mask: Vec<bool>,
}

impl SentencePairEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lay out two sequences in sentence-pair form with total length exactly
/// `l`. When the pair exceeds the budget, sentence B is truncated from the
/// tail first, then sentence A; a B truncated to nothing degenerates to the
/// single-sentence layout `[CLS] a [SEP] [PAD]...`, as does an empty B.
pub fn build_sentence_pair(a: &[usize], b: &[usize], l: usize) -> Result<SentencePairEncoding> {
    if l < 4 {
        return Err(Error::Param(format!("sentence pair length must be >= 4, got {l}")));
    }
    let pair_budget = l - 3; // [CLS] + two [SEP]
    let b_keep = b.len().min(pair_budget.saturating_sub(a.len().min(pair_budget)));
    let mut ids = Vec::with_capacity(l);
    let mut segments = Vec::with_capacity(l);
    ids.push(CLS_ID);
    segments.push(0u8);
    if b_keep == 0 {
        let a_keep = a.len().min(l - 2);
        ids.extend_from_slice(&a[..a_keep]);
        ids.push(SEP_ID);
        segments.resize(ids.len(), 0);
    } else {
        let a_keep = a.len().min(pair_budget);
        ids.extend_from_slice(&a[..a_keep]);
        ids.push(SEP_ID);
        segments.resize(ids.len(), 0);
        ids.extend_from_slice(&b[..b_keep]);
        ids.push(SEP_ID);
        segments.resize(ids.len(), 1);
    }
    let real = ids.len();
    ids.resize(l, PAD_ID);
    segments.resize(l, 0);
    let mask = (0..l).map(|i| i < real).collect();
    Ok(SentencePairEncoding { ids, segments, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_words(&["hello", "world", "a", "b", "c", ","]).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), Some(PAD_ID));
        assert_eq!(v.id("[CLS]"), Some(CLS_ID));
        assert_eq!(v.id("[SEP]"), Some(SEP_ID));
        assert_eq!(v.id("[UNK]"), Some(UNK_ID));
    }

    #[test]
    fn vocabulary_rejects_bad_layouts() {
        assert!(Vocabulary::new(vec!["[PAD]".into(), "[CLS]".into()]).is_err());
        assert!(Vocabulary::new(vec![
            "[CLS]".into(),
            "[PAD]".into(),
            "[SEP]".into(),
            "[UNK]".into(),
            "x".into()
        ])
        .is_err());
        assert!(Vocabulary::with_words(&["dup", "dup"]).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.size(), v.size());
        assert_eq!(back.id("world"), v.id("world"));
        assert_eq!(back.id("[SEP]"), Some(SEP_ID));
    }

    #[test]
    fn tokenize_empty_and_case_folding() {
        let v = vocab();
        assert!(tokenize("", &v).is_empty());
        let ids = tokenize("Hello hello", &v);
        assert_eq!(ids, vec![v.id("hello").unwrap(), v.id("hello").unwrap()]);
    }

    #[test]
    fn tokenize_unknown_word_maps_to_unk() {
        let v = vocab();
        assert_eq!(tokenize("zyxqq", &v), vec![UNK_ID]);
    }

    #[test]
    fn tokenize_splits_punctuation() {
        let v = vocab();
        let ids = tokenize("a,b", &v);
        assert_eq!(
            ids,
            vec![v.id("a").unwrap(), v.id(",").unwrap(), v.id("b").unwrap()]
        );
    }

    #[test]
    fn detokenize_strips_pad_and_errors_on_bad_id() {
        let v = vocab();
        assert_eq!(detokenize(&[], &v).unwrap(), "");
        let a = v.id("a").unwrap();
        assert_eq!(detokenize(&[a, PAD_ID, PAD_ID], &v).unwrap(), "a");
        assert!(detokenize(&[v.size()], &v).is_err());
        assert_eq!(detokenize(&[CLS_ID, a], &v).unwrap(), "[CLS] a");
    }

    #[test]
    fn aux_sentence_is_target_then_caption() {
        let aux = build_aux_sentence(&[9], &[5, 6]).unwrap();
        assert_eq!(aux, vec![9, 5, 6]);
        assert_eq!(build_aux_sentence(&[9], &[]).unwrap(), vec![9]);
        assert_eq!(build_aux_sentence(&[9, 8], &[5]).unwrap(), vec![9, 8, 5]);
        assert!(build_aux_sentence(&[], &[5]).is_err());
    }

    #[test]
    fn sentence_pair_reference_layout() {
        let p = build_sentence_pair(&[5], &[7], 6).unwrap();
        assert_eq!(p.ids, vec![CLS_ID, 5, SEP_ID, 7, SEP_ID, PAD_ID]);
        assert_eq!(p.segments, vec![0, 0, 0, 1, 1, 0]);
        assert_eq!(p.mask, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn sentence_pair_empty_b_degenerates_to_single() {
        let p = build_sentence_pair(&[5, 6], &[], 6).unwrap();
        assert_eq!(p.ids, vec![CLS_ID, 5, 6, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(p.segments, vec![0; 6]);
        assert_eq!(p.mask, vec![true, true, true, true, false, false]);
    }

    #[test]
    fn sentence_pair_truncates_b_tail_first() {
        // a=2 tokens, b=4 tokens, l=8: budget 5 -> b keeps 3
        let p = build_sentence_pair(&[10, 11], &[20, 21, 22, 23], 8).unwrap();
        assert_eq!(p.ids, vec![CLS_ID, 10, 11, SEP_ID, 20, 21, 22, SEP_ID]);
        // a=6 tokens fills the budget alone -> b dropped, single layout, a cut to l-2
        let p = build_sentence_pair(&[1, 2, 3, 4, 5, 6].map(|v| v + 10), &[20], 6).unwrap();
        assert_eq!(p.ids, vec![CLS_ID, 11, 12, 13, 14, SEP_ID]);
        assert_eq!(p.segments, vec![0; 6]);
    }

    #[test]
    fn sentence_pair_rejects_tiny_length() {
        assert!(build_sentence_pair(&[5], &[6], 3).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pair_layout_invariants(
                a in proptest::collection::vec(4usize..40, 0..12),
                b in proptest::collection::vec(4usize..40, 0..12),
                l in 4usize..24
            ) {
                let p = build_sentence_pair(&a, &b, l).unwrap();
                prop_assert_eq!(p.ids.len(), l);
                prop_assert_eq!(p.segments.len(), l);
                prop_assert_eq!(p.mask.len(), l);
                prop_assert_eq!(p.ids[0], CLS_ID);
                // mask matches PAD exactly after position 0
                for i in 1..l {
                    prop_assert_eq!(p.mask[i], p.ids[i] != PAD_ID);
                }
                // segments monotone non-decreasing over the real span
                let real = p.mask.iter().filter(|m| **m).count();
                for i in 1..real {
                    prop_assert!(p.segments[i] >= p.segments[i - 1]);
                }
                // last real token is a [SEP]
                prop_assert_eq!(p.ids[real - 1], SEP_ID);
            }

            #[test]
            fn aux_sentence_length_adds_up(
                t in proptest::collection::vec(4usize..40, 1..6),
                c in proptest::collection::vec(4usize..40, 0..8)
            ) {
                let aux = build_aux_sentence(&t, &c).unwrap();
                prop_assert_eq!(aux.len(), t.len() + c.len());
            }

            #[test]
            fn tokenize_round_trips_known_words(idx in proptest::collection::vec(0usize..4, 1..8)) {
                let words = ["hello", "world", "blob", "red"];
                let v = Vocabulary::with_words(&words).unwrap();
                let s: String = idx.iter().map(|i| words[*i]).collect::<Vec<_>>().join(" ");
                let ids = tokenize(&s, &v);
                prop_assert_eq!(detokenize(&ids, &v).unwrap(), s);
            }
        }
    }
}
