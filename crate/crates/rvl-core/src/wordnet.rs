//! Loader and query layer for WordNet databases in the plain-text WNDB
//! layout (`index.<pos>` / `data.<pos>`, one line per entry, license header
//! lines prefixed with whitespace).
//!
//! Only hypernym pointers (`@`, `@i`) and adjective similar-to pointers (`&`)
//! become graph edges; hyponym edges are synthesized as exact inverses of the
//! hypernym edges, so inverse completeness holds by construction. All other
//! relations are ignored.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl Pos {
    pub const ALL: [Pos; 4] = [Pos::Noun, Pos::Verb, Pos::Adj, Pos::Adv];

    pub fn file_suffix(self) -> &'static str {
        match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adj => "adj",
            Pos::Adv => "adv",
        }
    }

    /// Part-of-speech letter as used in WNDB files. Satellite adjectives
    /// (`s`) collapse into [`Pos::Adj`].
    pub fn from_char(c: char) -> Option<Pos> {
        match c {
            'n' => Some(Pos::Noun),
            'v' => Some(Pos::Verb),
            'a' | 's' => Some(Pos::Adj),
            'r' => Some(Pos::Adv),
            _ => None,
        }
    }

    fn letter(self) -> char {
        match self {
            Pos::Noun => 'n',
            Pos::Verb => 'v',
            Pos::Adj => 'a',
            Pos::Adv => 'r',
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Identity of a synset: byte offset inside its data file plus part of speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SynsetId {
    pub offset: u64,
    pub pos: Pos,
}

impl fmt::Display for SynsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08}-{}", self.offset, self.pos)
    }
}

#[derive(Debug, Clone)]
pub struct Synset {
    pub id: SynsetId,
    /// Lowercase lemmas in database order; multiword lemmas use underscores.
    pub lemmas: Vec<String>,
    pub hypernyms: Vec<SynsetId>,
    /// Synthesized inverse of `hypernyms`, in data-file load order.
    pub hyponyms: Vec<SynsetId>,
    /// Adjective similar-to (`&`) edges; empty for other parts of speech.
    pub similar: Vec<SynsetId>,
    pub gloss: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Hypernym,
    Hyponym,
}

/// Search depth for co-hyponym candidate collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SearchOrder {
    /// Siblings: up one hypernym step, down one hyponym step.
    First,
    /// Exactly two steps up, then exactly two steps down.
    Second,
}

#[derive(Debug, Error)]
pub enum WordNetError {
    #[error("missing database file {path}")]
    MissingFile { path: PathBuf },
    #[error("{file}:{line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("unknown synset {id}")]
    UnknownSynset { id: SynsetId },
}

#[derive(Debug, Default)]
pub struct WordNetGraph {
    synsets: HashMap<SynsetId, Synset>,
    lemma_index: HashMap<(String, Pos), Vec<SynsetId>>,
    /// Load order: data files in POS order, lines in file order.
    order: Vec<SynsetId>,
    version: Option<String>,
}

impl WordNetGraph {
    pub fn synset(&self, id: SynsetId) -> Option<&Synset> {
        self.synsets.get(&id)
    }

    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }

    pub fn count_pos(&self, pos: Pos) -> usize {
        self.order.iter().filter(|id| id.pos == pos).count()
    }

    /// Database version if the header declares one, e.g. "3.0".
    pub fn version(&self) -> Option<&str> {
        self.version.as_deref()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Synset> {
        self.order.iter().map(|id| &self.synsets[id])
    }

    /// Synsets containing `lemma` with part of speech `pos`, in database
    /// sense order. Lookup is case-insensitive; absent lemmas yield empty.
    pub fn lookup_synsets(&self, lemma: &str, pos: Pos) -> Vec<SynsetId> {
        let key = (lemma.to_lowercase(), pos);
        self.lemma_index.get(&key).cloned().unwrap_or_default()
    }

    pub fn contains_lemma(&self, lemma: &str, pos: Pos) -> bool {
        self.lemma_index.contains_key(&(lemma.to_lowercase(), pos))
    }

    pub fn related_synsets(&self, id: SynsetId, rel: Relation) -> Result<Vec<SynsetId>, WordNetError> {
        let syn = self.synsets.get(&id).ok_or(WordNetError::UnknownSynset { id })?;
        Ok(match rel {
            Relation::Hypernym => syn.hypernyms.clone(),
            Relation::Hyponym => syn.hyponyms.clone(),
        })
    }

    /// All synsets reachable from `id` by one or more hypernym steps.
    pub fn hypernym_closure(&self, id: SynsetId) -> Vec<SynsetId> {
        let mut out = Vec::new();
        let mut queue = match self.synsets.get(&id) {
            Some(s) => s.hypernyms.clone(),
            None => return out,
        };
        while let Some(next) = queue.pop() {
            if out.contains(&next) {
                continue;
            }
            out.push(next);
            if let Some(s) = self.synsets.get(&next) {
                queue.extend(s.hypernyms.iter().copied());
            }
        }
        out
    }

    /// Adjective cluster around each sense of `lemma`: synsets reachable over
    /// at most two similar-to hops, which covers head and satellites whether
    /// the sense itself is a head or a satellite.
    fn adj_cluster(&self, sense: SynsetId) -> Vec<SynsetId> {
        let mut cluster = vec![sense];
        if let Some(s) = self.synsets.get(&sense) {
            for &n in &s.similar {
                if !cluster.contains(&n) {
                    cluster.push(n);
                }
                if let Some(ns) = self.synsets.get(&n) {
                    for &nn in &ns.similar {
                        if !cluster.contains(&nn) {
                            cluster.push(nn);
                        }
                    }
                }
            }
        }
        cluster
    }

    /// Lemmas that can replace `lemma` while keeping a shared ancestor at the
    /// given search order. Nouns and verbs walk hypernym/hyponym edges;
    /// adjectives use their similar-to cluster and only answer at
    /// [`SearchOrder::First`]. The query lemma itself and multiword lemmas
    /// are excluded. Order of results is deterministic: database sense order,
    /// then pointer order.
    pub fn co_hyponym_candidates(&self, lemma: &str, pos: Pos, order: SearchOrder) -> Vec<String> {
        let query = lemma.to_lowercase();
        let mut out: Vec<String> = Vec::new();
        let push = |out: &mut Vec<String>, l: &str| {
            if l != query && !l.contains('_') && !out.iter().any(|x| x == l) {
                out.push(l.to_string());
            }
        };

        if pos == Pos::Adj {
            if order == SearchOrder::Second {
                return out;
            }
            for sense in self.lookup_synsets(&query, pos) {
                for id in self.adj_cluster(sense) {
                    if let Some(s) = self.synsets.get(&id) {
                        for l in &s.lemmas {
                            push(&mut out, l);
                        }
                    }
                }
            }
            return out;
        }

        for sense in self.lookup_synsets(&query, pos) {
            let Some(s) = self.synsets.get(&sense) else { continue };
            match order {
                SearchOrder::First => {
                    for &h in &s.hypernyms {
                        for &c in &self.synsets[&h].hyponyms {
                            for l in &self.synsets[&c].lemmas {
                                push(&mut out, l);
                            }
                        }
                    }
                }
                SearchOrder::Second => {
                    let mut uppers = Vec::new();
                    for &h1 in &s.hypernyms {
                        for &h2 in &self.synsets[&h1].hypernyms {
                            if !uppers.contains(&h2) {
                                uppers.push(h2);
                            }
                        }
                    }
                    for h2 in uppers {
                        for &c1 in &self.synsets[&h2].hyponyms {
                            for &c2 in &self.synsets[&c1].hyponyms {
                                for l in &self.synsets[&c2].lemmas {
                                    push(&mut out, l);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Loads the eight WNDB files under `dir`. All four parts of speech must be
/// present. Every index entry and every materialized edge must resolve to a
/// loaded synset, otherwise loading fails.
pub fn load_wordnet(dir: &Path) -> Result<WordNetGraph, WordNetError> {
    let mut sources = Vec::new();
    for pos in Pos::ALL {
        for kind in ["index", "data"] {
            let path = dir.join(format!("{kind}.{}", pos.file_suffix()));
            if !path.is_file() {
                return Err(WordNetError::MissingFile { path });
            }
            let text = std::fs::read_to_string(&path).map_err(|e| WordNetError::Parse {
                file: path.display().to_string(),
                line: 0,
                reason: format!("read failed: {e}"),
            })?;
            sources.push((pos, kind, path.display().to_string(), text));
        }
    }
    let refs: Vec<(Pos, &str, &str, &str)> = sources
        .iter()
        .map(|(p, k, n, t)| (*p, *k, n.as_str(), t.as_str()))
        .collect();
    parse_sources(&refs)
}

/// Parses a database from in-memory sources: one (pos, "index"|"data", name,
/// text) entry per file. Used by [`load_wordnet`] and by the embedded
/// databases in [`crate::resources`].
pub fn parse_sources(sources: &[(Pos, &str, &str, &str)]) -> Result<WordNetGraph, WordNetError> {
    let mut g = WordNetGraph::default();
    let mut edge_origin: HashMap<SynsetId, (String, usize)> = HashMap::new();

    for &(pos, kind, name, text) in sources {
        if kind != "data" {
            continue;
        }
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.starts_with(char::is_whitespace) || line.is_empty() {
                if g.version.is_none() {
                    g.version = extract_version(line);
                }
                continue;
            }
            let syn = parse_data_line(line, pos, name, lineno)?;
            if g.synsets.contains_key(&syn.id) {
                return Err(WordNetError::Parse {
                    file: name.to_string(),
                    line: lineno,
                    reason: format!("duplicate synset offset {}", syn.id),
                });
            }
            edge_origin.insert(syn.id, (name.to_string(), lineno));
            g.order.push(syn.id);
            g.synsets.insert(syn.id, syn);
        }
    }

    // validate edges, then synthesize hyponyms as exact inverses
    let mut inverse: Vec<(SynsetId, SynsetId)> = Vec::new();
    for id in &g.order {
        let syn = &g.synsets[id];
        for &h in syn.hypernyms.iter().chain(&syn.similar) {
            if !g.synsets.contains_key(&h) {
                let (file, line) = edge_origin[id].clone();
                return Err(WordNetError::Parse {
                    file,
                    line,
                    reason: format!("pointer target {h} not in database"),
                });
            }
        }
        for &h in &syn.hypernyms {
            inverse.push((h, *id));
        }
    }
    for (parent, child) in inverse {
        g.synsets.get_mut(&parent).unwrap().hyponyms.push(child);
    }

    for &(pos, kind, name, text) in sources {
        if kind != "index" {
            continue;
        }
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.starts_with(char::is_whitespace) || line.is_empty() {
                continue;
            }
            let (lemma, ids) = parse_index_line(line, pos, name, lineno)?;
            for id in &ids {
                if !g.synsets.contains_key(id) {
                    return Err(WordNetError::Parse {
                        file: name.to_string(),
                        line: lineno,
                        reason: format!("index entry {lemma} references missing synset {id}"),
                    });
                }
            }
            g.lemma_index.insert((lemma, pos), ids);
        }
    }

    Ok(g)
}

fn extract_version(line: &str) -> Option<String> {
    let at = line.find("WordNet ")?;
    let rest = &line[at + "WordNet ".len()..];
    let v: String = rest
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    if v.is_empty() {
        None
    } else {
        Some(v)
    }
}

struct Cursor<'a> {
    toks: std::str::SplitWhitespace<'a>,
    file: &'a str,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str, WordNetError> {
        self.toks.next().ok_or_else(|| WordNetError::Parse {
            file: self.file.to_string(),
            line: self.line,
            reason: format!("unexpected end of line, expected {what}"),
        })
    }

    fn err(&self, reason: String) -> WordNetError {
        WordNetError::Parse {
            file: self.file.to_string(),
            line: self.line,
            reason,
        }
    }

    fn usize_radix(&mut self, what: &str, radix: u32) -> Result<usize, WordNetError> {
        let t = self.next(what)?;
        usize::from_str_radix(t, radix)
            .map_err(|_| self.err(format!("bad {what} field {t:?}")))
    }
}

fn parse_data_line(line: &str, file_pos: Pos, file: &str, lineno: usize) -> Result<Synset, WordNetError> {
    let (fields, gloss) = match line.split_once(" | ") {
        Some((f, g)) => (f, g.trim().to_string()),
        None => (line, String::new()),
    };
    let mut c = Cursor { toks: fields.split_whitespace(), file, line: lineno };

    let offset: u64 = c
        .next("synset_offset")?
        .parse()
        .map_err(|_| c.err("bad synset_offset".into()))?;
    let _lex_filenum = c.next("lex_filenum")?;
    let ss = c.next("ss_type")?;
    let pos = ss
        .chars()
        .next()
        .and_then(Pos::from_char)
        .ok_or_else(|| c.err(format!("bad ss_type {ss:?}")))?;
    if pos != file_pos {
        return Err(c.err(format!("ss_type {ss:?} in {} file", file_pos.file_suffix())));
    }

    let w_cnt = c.usize_radix("w_cnt", 16)?;
    if w_cnt == 0 {
        return Err(c.err("synset with zero words".into()));
    }
    let mut lemmas = Vec::with_capacity(w_cnt);
    for _ in 0..w_cnt {
        let w = c.next("word")?;
        let _lex_id = c.next("lex_id")?;
        lemmas.push(w.to_lowercase());
    }

    let p_cnt = c.usize_radix("p_cnt", 10)?;
    let mut hypernyms = Vec::new();
    let mut similar = Vec::new();
    for _ in 0..p_cnt {
        let sym = c.next("pointer_symbol")?;
        let tgt_off: u64 = c
            .next("pointer offset")?
            .parse()
            .map_err(|_| c.err("bad pointer offset".into()))?;
        let tgt_pos = c
            .next("pointer pos")?
            .chars()
            .next()
            .and_then(Pos::from_char)
            .ok_or_else(|| c.err("bad pointer pos".into()))?;
        let _src_tgt = c.next("source/target")?;
        let target = SynsetId { offset: tgt_off, pos: tgt_pos };
        match sym {
            "@" | "@i" => hypernyms.push(target),
            "&" => similar.push(target),
            _ => {}
        }
    }
    // verb frames and anything else before the gloss separator are ignored

    Ok(Synset {
        id: SynsetId { offset, pos: file_pos },
        lemmas,
        hypernyms,
        hyponyms: Vec::new(),
        similar,
        gloss,
    })
}

fn parse_index_line(
    line: &str,
    file_pos: Pos,
    file: &str,
    lineno: usize,
) -> Result<(String, Vec<SynsetId>), WordNetError> {
    let mut c = Cursor { toks: line.split_whitespace(), file, line: lineno };
    let lemma = c.next("lemma")?.to_lowercase();
    let pos_field = c.next("pos")?;
    let pos = pos_field
        .chars()
        .next()
        .and_then(Pos::from_char)
        .ok_or_else(|| c.err(format!("bad pos {pos_field:?}")))?;
    if pos != file_pos {
        return Err(c.err(format!("pos {pos_field:?} in {} index", file_pos.file_suffix())));
    }
    let synset_cnt = c.usize_radix("synset_cnt", 10)?;
    let p_cnt = c.usize_radix("p_cnt", 10)?;
    for _ in 0..p_cnt {
        c.next("ptr_symbol")?;
    }
    let _sense_cnt = c.usize_radix("sense_cnt", 10)?;
    let _tagsense_cnt = c.usize_radix("tagsense_cnt", 10)?;
    let mut ids = Vec::with_capacity(synset_cnt);
    for _ in 0..synset_cnt {
        let off: u64 = c
            .next("synset_offset")?
            .parse()
            .map_err(|_| c.err("bad index synset_offset".into()))?;
        ids.push(SynsetId { offset: off, pos: file_pos });
    }
    if ids.is_empty() {
        return Err(c.err(format!("index entry {lemma} lists no synsets")));
    }
    Ok((lemma, ids))
}
