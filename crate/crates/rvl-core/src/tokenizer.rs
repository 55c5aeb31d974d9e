//! WordPiece-style tokenization aligned to [`segment_words`], plus the two
//! corruption schemes the objectives need: span-aware MLM masking and
//! rewritten-position targets.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linguistics::segment_words;
use crate::rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("duplicate vocabulary token {token:?} on line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary token on line {line} is empty or contains whitespace")]
    BadToken { line: usize },
    #[error("vocabulary is missing special token {token}")]
    MissingSpecialToken { token: &'static str },
    #[error("input text is empty")]
    EmptyInput,
    #[error("forced span ({start}, {end}) is outside the non-special token range of a length-{len} sequence")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("word index {word_index} has no surviving token span")]
    SpanTruncated { word_index: usize },
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Vocabulary: one token per line, id = line position. The five special
/// tokens must all be present.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
    regular: Vec<u32>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim_end();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(TokenizerError::BadToken { line: i + 1 });
            }
            if index.insert(tok.to_string(), tokens.len() as u32).is_some() {
                return Err(TokenizerError::DuplicateToken { token: tok.to_string(), line: i + 1 });
            }
            tokens.push(tok.to_string());
        }
        let need = |name: &'static str| {
            index.get(name).copied().ok_or(TokenizerError::MissingSpecialToken { token: name })
        };
        let (pad, unk, cls, sep, mask) =
            (need(PAD)?, need(UNK)?, need(CLS)?, need(SEP)?, need(MASK)?);
        let special = [pad, unk, cls, sep, mask];
        let regular = (0..tokens.len() as u32).filter(|id| !special.contains(id)).collect();
        Ok(Vocab { tokens, index, pad, unk, cls, sep, mask, regular })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    /// Uniform draw over non-special token ids.
    pub fn random_regular(&self, rng: &mut impl Rng) -> u32 {
        self.regular[rng.random_range(0..self.regular.len())]
    }
}

/// Tokenized caption. `word_spans` maps each fully retained word index (over
/// [`segment_words`] of the source text) to its half-open token span in
/// `ids`; words whose pieces would cross the truncation limit are dropped
/// whole and have no entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    pub word_spans: BTreeMap<usize, (usize, usize)>,
    pub n_words: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token span of `word_index`, None when truncated away.
    pub fn span_of(&self, word_index: usize) -> Option<(usize, usize)> {
        self.word_spans.get(&word_index).copied()
    }
}

/// Greedy longest-prefix pieces for one lowercased word, continuations
/// prefixed with `##`. None when any remainder has no matching piece.
fn wordpiece(word: &str, vocab: &Vocab) -> Option<Vec<u32>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < word.len() {
        let mut end = word.len();
        let mut hit = None;
        while end > start {
            if !word.is_char_boundary(end) {
                end -= 1;
                continue;
            }
            let candidate = if start == 0 {
                vocab.id(&word[..end])
            } else {
                vocab.id(&format!("##{}", &word[start..end]))
            };
            if let Some(id) = candidate {
                hit = Some((id, end));
                break;
            }
            end -= 1;
        }
        let (id, end) = hit?;
        out.push(id);
        start = end;
    }
    Some(out)
}

/// Tokenizes `text` into `[CLS] pieces [SEP]`, truncated to at most
/// `max_len` tokens including the specials. Words are segmented exactly as
/// the rewriter sees them, lowercased, then split greedily; a word with any
/// unmatchable remainder becomes one `[UNK]`. Truncation drops whole words,
/// so every surviving span is complete.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq, TokenizerError> {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    if text.trim().is_empty() {
        return Err(TokenizerError::EmptyInput);
    }
    let words = segment_words(text);
    let n_words = words.len();
    let budget = max_len - 2;

    let mut ids = vec![vocab.cls_id()];
    let mut word_spans = BTreeMap::new();
    for (w, span) in words.iter().enumerate() {
        let pieces =
            wordpiece(&span.text.to_lowercase(), vocab).unwrap_or_else(|| vec![vocab.unk_id()]);
        if ids.len() - 1 + pieces.len() > budget {
            break;
        }
        let start = ids.len();
        ids.extend_from_slice(&pieces);
        word_spans.insert(w, (start, ids.len()));
    }
    ids.push(vocab.sep_id());

    let tokens = ids.iter().map(|&id| vocab.token(id).unwrap().to_string()).collect();
    Ok(TokenSeq { ids, tokens, word_spans, n_words })
}

/// Masking policy. `rate` selects positions; a selected position becomes
/// `[MASK]` with `mask_prob`, a random regular token with `random_prob`, and
/// keeps its surface id otherwise. All selected positions are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { rate: 0.15, mask_prob: 0.8, random_prob: 0.1 }
    }
}

/// MLM-corrupted sequence. `mlm_labels[p]` holds the original id for every
/// selected position and None elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSeq {
    pub ids: Vec<u32>,
    pub mlm_labels: Vec<Option<u32>>,
    pub forced_position: Option<usize>,
}

/// Applies MLM corruption under a fixed draw order: one selection draw per
/// eligible position (everything but [CLS], [SEP], [PAD], [MASK]) in
/// position order, then corruption draws in position order. Every position
/// of `forced_span` (token coordinates, from the word that the rewriter
/// replaced) is additionally selected and corrupted like any other.
pub fn apply_mlm_mask(
    seq: &TokenSeq,
    forced_span: Option<(usize, usize)>,
    vocab: &Vocab,
    policy: &MaskPolicy,
    seed: u64,
) -> Result<MaskedSeq, TokenizerError> {
    assert!(
        (0.0..=1.0).contains(&policy.rate) && policy.mask_prob + policy.random_prob <= 1.0 + 1e-12,
        "mask policy probabilities out of range"
    );
    let eligible = |id: u32| {
        id != vocab.cls_id() && id != vocab.sep_id() && id != vocab.pad_id() && id != vocab.mask_id()
    };
    if let Some((start, end)) = forced_span {
        let inside = start < end
            && end <= seq.ids.len()
            && (start..end).all(|p| eligible(seq.ids[p]));
        if !inside {
            return Err(TokenizerError::SpanOutOfRange { start, end, len: seq.ids.len() });
        }
    }

    let mut rng = rng::stream(seed);
    let mut selected = vec![false; seq.ids.len()];
    for (p, &id) in seq.ids.iter().enumerate() {
        if eligible(id) {
            selected[p] = rng.random::<f64>() < policy.rate;
        }
    }
    if let Some((start, end)) = forced_span {
        for p in start..end {
            selected[p] = true;
        }
    }

    let mut ids = seq.ids.clone();
    let mut mlm_labels = vec![None; seq.ids.len()];
    for p in 0..seq.ids.len() {
        if !selected[p] {
            continue;
        }
        mlm_labels[p] = Some(seq.ids[p]);
        let u = rng.random::<f64>();
        if u < policy.mask_prob {
            ids[p] = vocab.mask_id();
        } else if u < policy.mask_prob + policy.random_prob {
            ids[p] = vocab.random_regular(&mut rng);
        }
    }
    Ok(MaskedSeq { ids, mlm_labels, forced_position: forced_span.map(|(s, _)| s) })
}

/// Target for rewritten-word position prediction: the first piece of the
/// replaced word, over a one-hot of the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlmTarget {
    pub position: usize,
    pub length: usize,
}

/// Position target for the rewritten sequence. Errors when the replaced
/// word's span did not survive tokenization (truncated or out of range);
/// callers skip the position objective for such samples.
pub fn rlm_target(seq: &TokenSeq, word_index: usize) -> Result<RlmTarget, TokenizerError> {
    let (start, _) =
        seq.word_spans.get(&word_index).ok_or(TokenizerError::SpanTruncated { word_index })?;
    Ok(RlmTarget { position: *start, length: seq.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        resources::micro_vocab()
    }

    #[test]
    fn parse_rejects_bad_vocabularies() {
        assert!(matches!(
            Vocab::parse("[PAD]\n[PAD]\n"),
            Err(TokenizerError::DuplicateToken { line: 2, .. })
        ));
        assert!(matches!(Vocab::parse("a\n\nb\n"), Err(TokenizerError::BadToken { line: 2 })));
        assert!(matches!(
            Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n"),
            Err(TokenizerError::MissingSpecialToken { token: MASK })
        ));
    }

    #[test]
    fn tokenize_basic_with_continuations() {
        let v = vocab();
        let s = tokenize("Two red dogs", &v, 30).unwrap();
        assert_eq!(s.tokens, vec!["[CLS]", "two", "red", "dog", "##s", "[SEP]"]);
        assert_eq!(s.word_spans[&0], (1, 2));
        assert_eq!(s.word_spans[&1], (2, 3));
        assert_eq!(s.word_spans[&2], (3, 5));
        assert_eq!(s.n_words, 3);
    }

    #[test]
    fn empty_text_is_an_error() {
        let v = vocab();
        assert_eq!(tokenize("", &v, 30), Err(TokenizerError::EmptyInput));
        assert_eq!(tokenize("  \t", &v, 30), Err(TokenizerError::EmptyInput));
    }

    #[test]
    fn unknown_word_becomes_single_unk() {
        let v = vocab();
        let s = tokenize("a zebra", &v, 30).unwrap();
        assert_eq!(s.tokens, vec!["[CLS]", "a", "[UNK]", "[SEP]"]);
        assert_eq!(s.word_spans[&1], (2, 3));
    }

    #[test]
    fn punctuation_tokenizes_as_own_words() {
        let v = vocab();
        let s = tokenize("a dog.", &v, 30).unwrap();
        assert_eq!(s.tokens, vec!["[CLS]", "a", "dog", ".", "[SEP]"]);
        assert_eq!(s.word_spans.len(), 3);
    }

    #[test]
    fn truncation_drops_whole_words() {
        let v = vocab();
        // budget is 3 content tokens; "dogs" needs two pieces and would
        // overflow, so the sequence ends after "cat"
        let s = tokenize("a cat dogs", &v, 5).unwrap();
        assert_eq!(s.tokens, vec!["[CLS]", "a", "cat", "[SEP]"]);
        assert_eq!(s.n_words, 3);
        assert!(s.word_spans.contains_key(&1));
        assert!(!s.word_spans.contains_key(&2));
        assert_eq!(rlm_target(&s, 2), Err(TokenizerError::SpanTruncated { word_index: 2 }));
        assert_eq!(rlm_target(&s, 7), Err(TokenizerError::SpanTruncated { word_index: 7 }));
        assert_eq!(rlm_target(&s, 1), Ok(RlmTarget { position: 2, length: 4 }));
    }

    #[test]
    fn truncation_hits_exact_limit_for_single_piece_words() {
        let v = vocab();
        let text = vec!["dog"; 40].join(" ");
        let s = tokenize(&text, &v, 30).unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(s.ids[0], v.cls_id());
        assert_eq!(*s.ids.last().unwrap(), v.sep_id());
        assert_eq!(s.word_spans.len(), 28);
    }

    #[test]
    fn mask_rate_one_hits_every_eligible_position() {
        let v = vocab();
        let s = tokenize("two red dogs and one blue car", &v, 30).unwrap();
        let policy = MaskPolicy { rate: 1.0, mask_prob: 1.0, random_prob: 0.0 };
        let m = apply_mlm_mask(&s, None, &v, &policy, 7).unwrap();
        for p in 0..s.len() {
            if s.ids[p] == v.cls_id() || s.ids[p] == v.sep_id() {
                assert_eq!(m.ids[p], s.ids[p]);
                assert_eq!(m.mlm_labels[p], None);
            } else {
                assert_eq!(m.ids[p], v.mask_id());
                assert_eq!(m.mlm_labels[p], Some(s.ids[p]));
            }
        }
    }

    #[test]
    fn forced_span_is_labeled_even_at_rate_zero() {
        let v = vocab();
        let s = tokenize("two red dogs", &v, 30).unwrap();
        let policy = MaskPolicy { rate: 0.0, mask_prob: 1.0, random_prob: 0.0 };
        let span = s.span_of(2).unwrap();
        let m = apply_mlm_mask(&s, Some(span), &v, &policy, 11).unwrap();
        assert_eq!(m.forced_position, Some(3));
        assert_eq!(m.ids[3], v.mask_id());
        assert_eq!(m.ids[4], v.mask_id());
        assert_eq!(m.mlm_labels[3], Some(v.id("dog").unwrap()));
        assert_eq!(m.mlm_labels[4], Some(v.id("##s").unwrap()));
        assert_eq!(m.mlm_labels.iter().flatten().count(), 2);
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let v = vocab();
        let s = tokenize("one black duck sits on a chair by the table", &v, 30).unwrap();
        let p = MaskPolicy::default();
        assert_eq!(
            apply_mlm_mask(&s, Some((2, 3)), &v, &p, 3).unwrap(),
            apply_mlm_mask(&s, Some((2, 3)), &v, &p, 3).unwrap()
        );
        let all: Vec<MaskedSeq> =
            (0..40).map(|seed| apply_mlm_mask(&s, None, &v, &p, seed).unwrap()).collect();
        assert!(all.windows(2).any(|w| w[0] != w[1]), "seeds never changed the mask");
    }

    #[test]
    fn forced_span_bounds_are_validated() {
        let v = vocab();
        let s = tokenize("a dog", &v, 30).unwrap();
        let p = MaskPolicy::default();
        // [CLS] lives at 0 and [SEP] at 3; both are outside the forceable range
        for bad in [(0, 1), (3, 4), (2, 2), (2, 9)] {
            assert!(matches!(
                apply_mlm_mask(&s, Some(bad), &v, &p, 0),
                Err(TokenizerError::SpanOutOfRange { .. })
            ));
        }
        assert!(apply_mlm_mask(&s, Some((1, 3)), &v, &p, 0).is_ok());
    }

    proptest! {
        #[test]
        fn word_spans_reassemble_words(
            words in proptest::collection::vec(
                proptest::sample::select(vec![
                    "two", "red", "dogs", "and", "one", "blue", "car", "cats",
                    "playing", "table", "quickly", "several",
                ]),
                1..8,
            )
        ) {
            let v = vocab();
            let text = words.join(" ");
            let s = tokenize(&text, &v, 64).unwrap();
            prop_assert_eq!(s.n_words, words.len());
            for (w, word) in words.iter().enumerate() {
                let (start, end) = s.word_spans[&w];
                let glued: String = s.tokens[start..end]
                    .iter()
                    .map(|t| t.strip_prefix("##").unwrap_or(t))
                    .collect();
                prop_assert_eq!(glued, word.to_lowercase());
            }
            // spans tile the content region between [CLS] and [SEP]
            let mut cursor = 1;
            for (_, (start, end)) in &s.word_spans {
                prop_assert_eq!(*start, cursor);
                cursor = *end;
            }
            prop_assert_eq!(cursor, s.len() - 1);
        }

        #[test]
        fn masking_never_touches_unselected(seed in 0u64..500) {
            let v = vocab();
            let s = tokenize("two red dogs and one blue car sit quietly", &v, 30).unwrap();
            let m = apply_mlm_mask(&s, None, &v, &MaskPolicy::default(), seed).unwrap();
            for p in 0..s.len() {
                match m.mlm_labels[p] {
                    Some(orig) => prop_assert_eq!(orig, s.ids[p]),
                    None => prop_assert_eq!(m.ids[p], s.ids[p]),
                }
            }
        }
    }
}
