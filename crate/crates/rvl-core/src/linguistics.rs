//! Rule-based tagging and lemmatization over a loaded WordNet graph. The
//! tagger exists to find rewrite candidates in captions, not to be a general
//! POS tagger: it distinguishes content classes (noun, verb, adjective),
//! quantifiers, and everything else.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wordnet::{Pos, SearchOrder, WordNetGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Quantifier,
    Other,
}

impl PosTag {
    pub fn wordnet_pos(self) -> Option<Pos> {
        match self {
            PosTag::Noun => Some(Pos::Noun),
            PosTag::Verb => Some(Pos::Verb),
            PosTag::Adj => Some(Pos::Adj),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedWord {
    pub surface: String,
    pub lemma: String,
    pub tag: PosTag,
    pub word_index: usize,
}

/// A word occurrence inside the original text, with its byte span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon entry {entry:?} on line {line} contains whitespace")]
    BadEntry { entry: String, line: usize },
    #[error("lexicon is empty")]
    Empty,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagError {
    #[error("input text is empty")]
    EmptyInput,
}

/// Closed quantifier lexicon. Order is substitution order.
#[derive(Debug, Clone)]
pub struct QuantifierLexicon {
    words: Vec<String>,
    set: HashSet<String>,
}

impl QuantifierLexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut words = Vec::new();
        let mut set = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.contains(char::is_whitespace) {
                return Err(LexiconError::BadEntry { entry: line.to_string(), line: i + 1 });
            }
            let w = line.to_lowercase();
            if set.insert(w.clone()) {
                words.push(w);
            }
        }
        if words.is_empty() {
            return Err(LexiconError::Empty);
        }
        Ok(QuantifierLexicon { words, set })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.set.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lexicon entries in order, excluding `original`.
    pub fn substitutes_for(&self, original: &str) -> Vec<&str> {
        let orig = original.to_lowercase();
        self.words.iter().filter(|w| **w != orig).map(|w| w.as_str()).collect()
    }
}

/// Closed-class function words (determiners, pronouns, prepositions,
/// conjunctions, auxiliaries). Anything here tags as [`PosTag::Other`].
#[derive(Debug, Clone)]
pub struct FunctionWords {
    set: HashSet<String>,
}

impl FunctionWords {
    pub fn parse(text: &str) -> Self {
        let set = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        FunctionWords { set }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, std::io::Error> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.set.contains(&word.to_lowercase())
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Splits text into word occurrences: whitespace-separated chunks with
/// leading and trailing punctuation peeled off into their own tokens.
/// Internal punctuation (hyphens, apostrophes) stays inside the word.
pub fn segment_words(text: &str) -> Vec<WordSpan> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if (bytes[i] as char).is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !(bytes[i] as char).is_whitespace() {
            i += 1;
        }
        let chunk = &text[start..i];
        let mut core_start = 0;
        let mut core_end = chunk.len();
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        let chars: Vec<(usize, char)> = chunk.char_indices().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && is_punct(chars[lo].1) {
            leading.push(chars[lo]);
            lo += 1;
        }
        while hi > lo && is_punct(chars[hi - 1].1) {
            hi -= 1;
            trailing.push(chars[hi]);
        }
        trailing.reverse();
        if lo < hi {
            core_start = chars[lo].0;
            core_end = if hi < chars.len() { chars[hi].0 } else { chunk.len() };
        }
        for &(off, c) in &leading {
            out.push(WordSpan {
                text: c.to_string(),
                start: start + off,
                end: start + off + c.len_utf8(),
            });
        }
        if lo < hi {
            out.push(WordSpan {
                text: chunk[core_start..core_end].to_string(),
                start: start + core_start,
                end: start + core_end,
            });
        }
        for &(off, c) in &trailing {
            out.push(WordSpan {
                text: c.to_string(),
                start: start + off,
                end: start + off + c.len_utf8(),
            });
        }
    }
    out
}

/// Suffix detachment rules in trial order, per part of speech.
fn detachments(pos: Pos) -> &'static [(&'static str, &'static str)] {
    match pos {
        Pos::Noun => &[
            ("s", ""),
            ("ses", "s"),
            ("xes", "x"),
            ("zes", "z"),
            ("ches", "ch"),
            ("shes", "sh"),
            ("men", "man"),
            ("ies", "y"),
        ],
        Pos::Verb => &[
            ("s", ""),
            ("ies", "y"),
            ("es", "e"),
            ("es", ""),
            ("ed", "e"),
            ("ed", ""),
            ("ing", "e"),
            ("ing", ""),
        ],
        Pos::Adj => &[("er", ""), ("est", ""), ("r", ""), ("st", "")],
        Pos::Adv => &[],
    }
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Morphological base form of `surface` for `pos`: the surface itself when
/// the graph knows it, otherwise the first detachment candidate the graph
/// knows (with doubled final consonants undoubled for -ed/-ing stems),
/// otherwise the lowercased surface unchanged.
pub fn lemmatize(surface: &str, pos: Pos, graph: &WordNetGraph) -> String {
    let lower = surface.to_lowercase();
    if graph.contains_lemma(&lower, pos) {
        return lower;
    }
    for (suffix, replacement) in detachments(pos) {
        let Some(stem) = lower.strip_suffix(suffix) else { continue };
        if stem.is_empty() {
            continue;
        }
        let candidate = format!("{stem}{replacement}");
        if graph.contains_lemma(&candidate, pos) {
            return candidate;
        }
        // consonant-doubled stems: "running" strips to "runn", try "run"
        if replacement.is_empty() && pos == Pos::Verb {
            let cs: Vec<char> = stem.chars().collect();
            if cs.len() >= 3 && cs[cs.len() - 1] == cs[cs.len() - 2] && !is_vowel(cs[cs.len() - 1]) {
                let undoubled: String = cs[..cs.len() - 1].iter().collect();
                if graph.contains_lemma(&undoubled, pos) {
                    return undoubled;
                }
            }
        }
    }
    lower
}

/// True when some noun sense of `lemma` reaches a synset whose lemmas include
/// "physical_entity" through hypernym edges.
pub fn is_concrete_noun(lemma: &str, graph: &WordNetGraph) -> bool {
    for sense in graph.lookup_synsets(lemma, Pos::Noun) {
        for up in graph.hypernym_closure(sense) {
            if let Some(syn) = graph.synset(up) {
                if syn.lemmas.iter().any(|l| l == "physical_entity") {
                    return true;
                }
            }
        }
    }
    false
}

/// Tags each word of `text`. Decision ladder per word: punctuation, then the
/// quantifier lexicon, then function words, then WordNet lookup where the
/// part of speech with the most senses wins (ties noun > verb > adjective),
/// then out-of-vocabulary suffix heuristics.
pub fn tag_sentence(
    text: &str,
    graph: &WordNetGraph,
    quantifiers: &QuantifierLexicon,
    function_words: &FunctionWords,
) -> Result<Vec<TaggedWord>, TagError> {
    if text.trim().is_empty() {
        return Err(TagError::EmptyInput);
    }
    let mut out = Vec::new();
    for (word_index, word) in segment_words(text).into_iter().enumerate() {
        let surface = word.text;
        let lower = surface.to_lowercase();

        let (tag, lemma) = if surface.chars().all(is_punct) {
            (PosTag::Other, lower)
        } else if quantifiers.contains(&lower) {
            (PosTag::Quantifier, lower)
        } else if function_words.contains(&lower) {
            (PosTag::Other, lower)
        } else {
            let mut best: Option<(PosTag, String, usize)> = None;
            for (tag, pos) in [
                (PosTag::Noun, Pos::Noun),
                (PosTag::Verb, Pos::Verb),
                (PosTag::Adj, Pos::Adj),
            ] {
                let lemma = lemmatize(&surface, pos, graph);
                let senses = graph.lookup_synsets(&lemma, pos).len();
                if senses > 0 && best.as_ref().is_none_or(|(_, _, n)| senses > *n) {
                    best = Some((tag, lemma, senses));
                }
            }
            match best {
                Some((tag, lemma, _)) => (tag, lemma),
                None => {
                    let tag = if lower.ends_with("ing") || lower.ends_with("ed") {
                        PosTag::Verb
                    } else if lower.ends_with("ous") || lower.ends_with("ful") || lower.ends_with("ish") {
                        PosTag::Adj
                    } else {
                        PosTag::Other
                    };
                    (tag, lower)
                }
            }
        };
        out.push(TaggedWord { surface, lemma, tag, word_index });
    }
    Ok(out)
}

/// Word indices eligible for rewriting: content words whose lemma yields at
/// least one substitute. Nouns must additionally be concrete. Quantifiers
/// qualify whenever the lexicon offers an alternative.
pub fn select_rewrite_candidates(
    words: &[TaggedWord],
    graph: &WordNetGraph,
    quantifiers: &QuantifierLexicon,
) -> Vec<usize> {
    let mut out = Vec::new();
    for w in words {
        let eligible = match w.tag {
            PosTag::Quantifier => !quantifiers.substitutes_for(&w.lemma).is_empty(),
            PosTag::Noun => {
                is_concrete_noun(&w.lemma, graph)
                    && (!graph
                        .co_hyponym_candidates(&w.lemma, Pos::Noun, SearchOrder::First)
                        .is_empty()
                        || !graph
                            .co_hyponym_candidates(&w.lemma, Pos::Noun, SearchOrder::Second)
                            .is_empty())
            }
            PosTag::Verb | PosTag::Adj => {
                let pos = w.tag.wordnet_pos().unwrap();
                !graph.co_hyponym_candidates(&w.lemma, pos, SearchOrder::First).is_empty()
                    || !graph.co_hyponym_candidates(&w.lemma, pos, SearchOrder::Second).is_empty()
            }
            PosTag::Other => false,
        };
        if eligible {
            out.push(w.word_index);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources;

    fn fixtures() -> (WordNetGraph, QuantifierLexicon, FunctionWords) {
        (
            resources::micro_graph(),
            resources::default_quantifiers(),
            resources::default_function_words(),
        )
    }

    #[test]
    fn segmentation_peels_punctuation_keeps_hyphens() {
        let words: Vec<String> = segment_words("A dog, big-eared!")
            .into_iter()
            .map(|w| w.text)
            .collect();
        assert_eq!(words, vec!["A", "dog", ",", "big-eared", "!"]);
    }

    #[test]
    fn segmentation_spans_point_into_original() {
        let text = "  \"two dogs.\"";
        for w in segment_words(text) {
            assert_eq!(&text[w.start..w.end], w.text);
        }
    }

    #[test]
    fn lemmatize_examples() {
        let (g, _, _) = fixtures();
        assert_eq!(lemmatize("dogs", Pos::Noun, &g), "dog");
        assert_eq!(lemmatize("dog", Pos::Noun, &g), "dog");
        assert_eq!(lemmatize("running", Pos::Verb, &g), "run");
        assert_eq!(lemmatize("walked", Pos::Verb, &g), "walk");
        assert_eq!(lemmatize("sitting", Pos::Verb, &g), "sit");
        assert_eq!(lemmatize("flies", Pos::Verb, &g), "fly");
        // unknown word form falls back to the lowercased surface
        assert_eq!(lemmatize("Zebras", Pos::Noun, &g), "zebras");
    }

    #[test]
    fn tagging_ladder() {
        let (g, q, f) = fixtures();
        let tags: Vec<(String, PosTag)> = tag_sentence("two dogs run", &g, &q, &f)
            .unwrap()
            .into_iter()
            .map(|w| (w.lemma.clone(), w.tag))
            .collect();
        assert_eq!(
            tags,
            vec![
                ("two".to_string(), PosTag::Quantifier),
                ("dog".to_string(), PosTag::Noun),
                ("run".to_string(), PosTag::Verb),
            ]
        );

        let t = tag_sentence("a dog", &g, &q, &f).unwrap();
        assert_eq!(t[0].tag, PosTag::Other);
        assert_eq!(t[1].tag, PosTag::Noun);
    }

    #[test]
    fn empty_input_is_an_error() {
        let (g, q, f) = fixtures();
        assert_eq!(tag_sentence("", &g, &q, &f), Err(TagError::EmptyInput));
        assert_eq!(tag_sentence("   \t ", &g, &q, &f), Err(TagError::EmptyInput));
    }

    #[test]
    fn tie_breaks_prefer_nouns() {
        let (g, q, f) = fixtures();
        // "duck" has one noun sense and one verb sense in the micro graph
        let t = tag_sentence("duck", &g, &q, &f).unwrap();
        assert_eq!(t[0].tag, PosTag::Noun);
    }

    #[test]
    fn oov_suffix_heuristics() {
        let (g, q, f) = fixtures();
        let t = tag_sentence("zooming glamorous xylophone", &g, &q, &f).unwrap();
        assert_eq!(t[0].tag, PosTag::Verb);
        assert_eq!(t[1].tag, PosTag::Adj);
        assert_eq!(t[2].tag, PosTag::Other);
    }

    #[test]
    fn concreteness_requires_physical_entity_ancestor() {
        let (g, _, _) = fixtures();
        assert!(is_concrete_noun("dog", &g));
        assert!(is_concrete_noun("table", &g));
        assert!(!is_concrete_noun("idea", &g));
        assert!(!is_concrete_noun("unknownword", &g));
    }

    #[test]
    fn candidate_selection() {
        let (g, q, f) = fixtures();
        let words = tag_sentence("two red dogs sit on a table", &g, &q, &f).unwrap();
        let cands = select_rewrite_candidates(&words, &g, &q);
        assert_eq!(cands, vec![0, 1, 2, 3, 6]);

        // abstract noun with siblings still fails the concreteness gate
        let words = tag_sentence("an idea", &g, &q, &f).unwrap();
        assert!(select_rewrite_candidates(&words, &g, &q).is_empty());
    }

    #[test]
    fn quantifier_lexicon_rejects_bad_lines() {
        assert!(QuantifierLexicon::parse("one\ntwo words\n").is_err());
        assert!(QuantifierLexicon::parse("# only comments\n").is_err());
    }
}
