//! Databases and lexicons embedded in the crate so every binary and test can
//! run without external data. The same files exist under `resources/` for
//! loading through the file-based APIs.

use crate::linguistics::{FunctionWords, QuantifierLexicon};
use crate::tokenizer::Vocab;
use crate::wordnet::{parse_sources, Pos, WordNetGraph};

macro_rules! micro_file {
    ($name:literal) => {
        include_str!(concat!("../resources/wndb-micro/", $name))
    };
}

/// The bundled micro lexical database: a compact WNDB-format graph covering
/// the toy world's nouns, attributes, and a small verb hierarchy.
pub fn micro_graph() -> WordNetGraph {
    let sources: Vec<(Pos, &str, &str, &str)> = vec![
        (Pos::Noun, "index", "wndb-micro/index.noun", micro_file!("index.noun")),
        (Pos::Noun, "data", "wndb-micro/data.noun", micro_file!("data.noun")),
        (Pos::Verb, "index", "wndb-micro/index.verb", micro_file!("index.verb")),
        (Pos::Verb, "data", "wndb-micro/data.verb", micro_file!("data.verb")),
        (Pos::Adj, "index", "wndb-micro/index.adj", micro_file!("index.adj")),
        (Pos::Adj, "data", "wndb-micro/data.adj", micro_file!("data.adj")),
        (Pos::Adv, "index", "wndb-micro/index.adv", micro_file!("index.adv")),
        (Pos::Adv, "data", "wndb-micro/data.adv", micro_file!("data.adv")),
    ];
    parse_sources(&sources).expect("embedded micro database is well-formed")
}

pub fn default_quantifiers() -> QuantifierLexicon {
    QuantifierLexicon::parse(include_str!("../resources/quantifiers.txt"))
        .expect("embedded quantifier lexicon is well-formed")
}

pub fn default_function_words() -> FunctionWords {
    FunctionWords::parse(include_str!("../resources/function-words.txt"))
}

pub fn micro_vocab() -> Vocab {
    Vocab::parse(include_str!("../resources/vocab-micro.txt"))
        .expect("embedded vocabulary is well-formed")
}
