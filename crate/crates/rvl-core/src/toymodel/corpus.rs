//! Synthetic micro-world corpus. Each scene is a pair of object groups
//! rendered both as discrete visual symbols and as a templated caption, so
//! retrieval ground truth is exact and every caption is rewritable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Shape nouns. All resolve in the bundled lexical database as concrete
/// nouns with co-hyponyms, and their plurals tokenize without [UNK].
pub const SHAPES: [&str; 8] = ["dog", "cat", "fox", "car", "boat", "chair", "table", "ball"];
/// Color adjectives, all members of a shared attribute cluster.
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
/// Count words; indices map to counts 1..=3.
pub const COUNTS: [&str; 3] = ["one", "two", "three"];

/// Distinct visual symbols: one per (shape, color, count) triple.
pub const N_SYMBOLS: usize = SHAPES.len() * COLORS.len() * COUNTS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectGroup {
    pub shape: usize,
    pub color: usize,
    /// 1..=3.
    pub count: usize,
}

impl ObjectGroup {
    /// Stable id of this group's visual symbol.
    pub fn symbol(&self) -> usize {
        (self.shape * COLORS.len() + self.color) * COUNTS.len() + (self.count - 1)
    }

    pub fn phrase(&self) -> String {
        let noun = if self.count == 1 {
            SHAPES[self.shape].to_string()
        } else {
            pluralize(SHAPES[self.shape])
        };
        format!("{} {} {}", COUNTS[self.count - 1], COLORS[self.color], noun)
    }
}

pub(crate) fn pluralize(noun: &str) -> String {
    if noun.ends_with('x') || noun.ends_with('s') || noun.ends_with("ch") || noun.ends_with("sh") {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyScene {
    pub groups: [ObjectGroup; 2],
    /// One visual symbol per group, sorted (the scene is a multiset).
    pub visual_tokens: Vec<usize>,
    pub caption: String,
    /// Caption after word dropout at the corpus noise rate; equals `caption`
    /// at rate 0 and for eval scenes.
    pub noisy_caption: String,
}

fn render_caption(groups: &[ObjectGroup; 2]) -> String {
    format!("{} and {}", groups[0].phrase(), groups[1].phrase())
}

fn sample_group(rng: &mut impl Rng) -> ObjectGroup {
    ObjectGroup {
        shape: rng.random_range(0..SHAPES.len()),
        color: rng.random_range(0..COLORS.len()),
        count: rng.random_range(1..=COUNTS.len()),
    }
}

/// Groups are canonically ordered and differ in (shape, color), so scenes,
/// visual multisets, and captions are in bijection.
fn sample_scene(rng: &mut impl Rng, noise_rate: f64) -> ToyScene {
    let a = sample_group(rng);
    let b = loop {
        let g = sample_group(rng);
        if (g.shape, g.color) != (a.shape, a.color) {
            break g;
        }
    };
    let mut groups = [a, b];
    groups.sort();
    let caption = render_caption(&groups);
    let noisy_caption = drop_words(&caption, noise_rate, rng);
    ToyScene {
        visual_tokens: groups.iter().map(ObjectGroup::symbol).collect(),
        groups,
        caption,
        noisy_caption,
    }
}

/// Random word dropout. Keeps at least one word; rate 0 is the identity.
fn drop_words(caption: &str, rate: f64, rng: &mut impl Rng) -> String {
    if rate <= 0.0 {
        return caption.to_string();
    }
    let kept: Vec<&str> =
        caption.split_whitespace().filter(|_| rng.random::<f64>() >= rate).collect();
    if kept.is_empty() {
        caption.to_string()
    } else {
        kept.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub train: Vec<ToyScene>,
    pub eval: Vec<ToyScene>,
}

/// Deterministic corpus. Train scenes carry a noisy caption variant for the
/// first training stage; eval scenes are clean and caption-unique.
pub fn generate_toy_corpus(seed: u64, n_train: usize, n_eval: usize, noise_rate: f64) -> ToyCorpus {
    assert!(n_train >= 1 && n_eval >= 1, "corpus splits must be non-empty");
    assert!((0.0..1.0).contains(&noise_rate), "noise rate in [0, 1)");
    let mut rng = rng::derived_stream(seed, 0x7031);
    // Scenes are unique within each split: a duplicate scene renders the
    // identical caption, which would poison contrastive labels and negative
    // mining. About 10^4 distinct scenes exist, so rejection stays cheap.
    let mut train = Vec::with_capacity(n_train);
    let mut seen = std::collections::HashSet::new();
    while train.len() < n_train {
        let scene = sample_scene(&mut rng, noise_rate);
        if seen.insert(scene.caption.clone()) {
            train.push(scene);
        }
    }
    let mut eval = Vec::with_capacity(n_eval);
    let mut seen = std::collections::HashSet::new();
    while eval.len() < n_eval {
        let mut scene = sample_scene(&mut rng, 0.0);
        if seen.insert(scene.caption.clone()) {
            scene.noisy_caption = scene.caption.clone();
            eval.push(scene);
        }
    }
    ToyCorpus { train, eval }
}
