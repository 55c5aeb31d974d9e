//! Homonym sentence rewriting: replace exactly one content word of a caption
//! with a co-hyponym that shares a hypernym (or, for quantifiers, another
//! entry of the closed lexicon). The result is a fluent caption that is
//! subtly wrong for the image it came with.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linguistics::{
    segment_words, select_rewrite_candidates, tag_sentence, FunctionWords, PosTag,
    QuantifierLexicon,
};
use crate::rng;
use crate::wordnet::{SearchOrder, WordNetGraph};

/// How the substitute was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstituteSource {
    /// Sibling under a shared direct hypernym (adjectives: shared cluster).
    First,
    /// Two hypernym steps up, two hyponym steps down.
    Second,
    /// Another entry of the quantifier lexicon.
    QuantifierLexicon,
    /// Ablation mode: uniformly random word, no lexical relation.
    RandomWord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub original_words: Vec<String>,
    pub rewritten_words: Vec<String>,
    /// The source text, byte for byte.
    pub caption: String,
    /// The source text with only the replaced word's bytes substituted.
    pub rewritten: String,
    /// Index over [`segment_words`] tokens of the replaced word.
    pub replaced_index: usize,
    pub original_lemma: String,
    pub substitute_lemma: String,
    /// Inflected surface form inserted into the rewritten caption.
    pub substitute_surface: String,
    pub tag: PosTag,
    pub search_order: SubstituteSource,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewriteError {
    #[error("caption has no rewritable word")]
    NoCandidate,
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn is_cvc(chars: &[char]) -> bool {
    let n = chars.len();
    if n < 3 {
        return false;
    }
    let (a, b, c) = (chars[n - 3], chars[n - 2], chars[n - 1]);
    !is_vowel(a) && is_vowel(b) && !is_vowel(c) && !matches!(c, 'w' | 'x' | 'y')
}

fn attach_verb_ending(base: &str, ending: &str) -> String {
    let chars: Vec<char> = base.chars().collect();
    match ending {
        "ing" | "ed" => {
            if base.ends_with('e') && !base.ends_with("ee") {
                format!("{}{ending}", &base[..base.len() - 1])
            } else if is_cvc(&chars) {
                format!("{base}{}{ending}", chars[chars.len() - 1])
            } else {
                format!("{base}{ending}")
            }
        }
        "s" => {
            if base.ends_with('y') && chars.len() >= 2 && !is_vowel(chars[chars.len() - 2]) {
                format!("{}ies", &base[..base.len() - 1])
            } else {
                format!("{base}s")
            }
        }
        _ => base.to_string(),
    }
}

/// Inflects `substitute_lemma` to mirror the surface form being replaced:
/// plural nouns keep their plural (final y after a consonant -> ies,
/// otherwise -s), verb endings -ing/-ed/-s transfer with e-drop and
/// consonant doubling, and leading-case capitalization is preserved.
/// Irregular morphology is deliberately approximated by these suffix rules
/// ("dogs" -> "wolfs"); the supervision signal does not depend on it.
pub fn realize_surface(
    substitute_lemma: &str,
    original_surface: &str,
    original_lemma: &str,
    tag: PosTag,
) -> String {
    let lower = original_surface.to_lowercase();
    let inflected = lower != original_lemma;
    let mut out = match tag {
        PosTag::Noun if inflected && lower.ends_with('s') => {
            let chars: Vec<char> = substitute_lemma.chars().collect();
            if substitute_lemma.ends_with('y')
                && chars.len() >= 2
                && !is_vowel(chars[chars.len() - 2])
            {
                format!("{}ies", &substitute_lemma[..substitute_lemma.len() - 1])
            } else {
                format!("{substitute_lemma}s")
            }
        }
        PosTag::Verb if inflected => {
            if let Some(ending) = ["ing", "ed", "s"].iter().find(|e| lower.ends_with(**e)) {
                attach_verb_ending(substitute_lemma, ending)
            } else {
                substitute_lemma.to_string()
            }
        }
        _ => substitute_lemma.to_string(),
    };
    if original_surface.chars().next().is_some_and(char::is_uppercase) {
        let mut cs = out.chars();
        if let Some(first) = cs.next() {
            out = first.to_uppercase().collect::<String>() + cs.as_str();
        }
    }
    out
}

/// Replaces the word at `word_index` in `caption` with `substitute`,
/// preserving all other bytes (spacing, punctuation) exactly.
fn splice(caption: &str, word_index: usize, substitute: &str) -> String {
    let spans = segment_words(caption);
    let w = &spans[word_index];
    format!("{}{}{}", &caption[..w.start], substitute, &caption[w.end..])
}

fn fisher_yates<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn assemble(
    text: &str,
    idx: usize,
    substitute_surface: String,
    substitute_lemma: String,
    original_lemma: String,
    tag: PosTag,
    source: SubstituteSource,
    seed: u64,
) -> RewriteResult {
    let original_words: Vec<String> = segment_words(text).into_iter().map(|w| w.text).collect();
    let mut rewritten_words = original_words.clone();
    rewritten_words[idx] = substitute_surface.clone();
    RewriteResult {
        original_words,
        rewritten_words,
        caption: text.to_string(),
        rewritten: splice(text, idx, &substitute_surface),
        replaced_index: idx,
        original_lemma,
        substitute_lemma,
        substitute_surface,
        tag,
        search_order: source,
        seed,
    }
}

/// Rewrites one word of `text`. The candidate word is chosen uniformly at
/// random under `seed`; when the chosen word yields no substitute the next
/// candidate in the shuffled order is tried. Substitutes come from first-
/// order co-hyponym search, falling back to second order, or from the
/// quantifier lexicon for quantifier words.
pub fn rewrite_sentence(
    text: &str,
    graph: &WordNetGraph,
    quantifiers: &QuantifierLexicon,
    function_words: &FunctionWords,
    seed: u64,
) -> Result<RewriteResult, RewriteError> {
    let words = tag_sentence(text, graph, quantifiers, function_words)
        .map_err(|_| RewriteError::NoCandidate)?;
    let mut candidates = select_rewrite_candidates(&words, graph, quantifiers);
    if candidates.is_empty() {
        return Err(RewriteError::NoCandidate);
    }
    let mut rng = rng::stream(seed);
    fisher_yates(&mut candidates, &mut rng);

    for idx in candidates {
        let word = &words[idx];
        let (pool, source): (Vec<String>, SubstituteSource) = match word.tag {
            PosTag::Quantifier => (
                quantifiers
                    .substitutes_for(&word.lemma)
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
                SubstituteSource::QuantifierLexicon,
            ),
            PosTag::Noun | PosTag::Verb | PosTag::Adj => {
                let pos = word.tag.wordnet_pos().unwrap();
                let first = graph.co_hyponym_candidates(&word.lemma, pos, SearchOrder::First);
                if !first.is_empty() {
                    (first, SubstituteSource::First)
                } else {
                    (
                        graph.co_hyponym_candidates(&word.lemma, pos, SearchOrder::Second),
                        SubstituteSource::Second,
                    )
                }
            }
            PosTag::Other => continue,
        };
        let pool: Vec<String> = pool
            .into_iter()
            .filter(|c| !c.eq_ignore_ascii_case(&word.lemma))
            .collect();
        if pool.is_empty() {
            continue;
        }
        let lemma = pool[rng.random_range(0..pool.len())].clone();
        let surface = realize_surface(&lemma, &word.surface, &word.lemma, word.tag);
        return Ok(assemble(
            text,
            idx,
            surface,
            lemma,
            word.lemma.clone(),
            word.tag,
            source,
            seed,
        ));
    }
    Err(RewriteError::NoCandidate)
}

/// Ablation rewriting: replaces a uniformly random non-punctuation word with
/// a uniformly random word from `pool`, with no lexical relationship
/// required. Capitalization is preserved; nothing else is inflected.
pub fn rewrite_random_word(
    text: &str,
    pool: &[String],
    seed: u64,
) -> Result<RewriteResult, RewriteError> {
    let words = segment_words(text);
    let eligible: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.text.chars().any(|c| !c.is_ascii_punctuation()))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(RewriteError::NoCandidate);
    }
    let mut rng = rng::stream(seed);
    let idx = eligible[rng.random_range(0..eligible.len())];
    let original_lemma = words[idx].text.to_lowercase();
    let choices: Vec<&String> =
        pool.iter().filter(|p| !p.eq_ignore_ascii_case(&original_lemma)).collect();
    if choices.is_empty() {
        return Err(RewriteError::NoCandidate);
    }
    let lemma = choices[rng.random_range(0..choices.len())].clone();
    let surface = realize_surface(&lemma, &words[idx].text, &original_lemma, PosTag::Other);
    Ok(assemble(
        text,
        idx,
        surface,
        lemma,
        original_lemma,
        PosTag::Other,
        SubstituteSource::RandomWord,
        seed,
    ))
}
