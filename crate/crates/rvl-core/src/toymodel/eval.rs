//! Held-out evaluation: two-stage retrieval (uni-modal recall, matching-head
//! rerank) and rewritten-position prediction accuracy.

use serde::{Deserialize, Serialize};

use crate::rewriter::rewrite_sentence;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{dot, Tensor};
use crate::tokenizer::{rlm_target, tokenize, Vocab};
use crate::toymodel::corpus::ToyScene;
use crate::toymodel::encoders::{
    cross_block, image_states, pool, project, ritm_head, rlm_head, text_states, ToyEncoders,
};
use crate::toymodel::train::{non_special_mask, valid_positions, TrainResources, EVAL_RLM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlmReport {
    /// Top-1 accuracy of the argmax position over valid tokens.
    pub accuracy: f64,
    pub correct: usize,
    /// Scenes that produced a scorable rewrite; truncated spans and
    /// unrewritable captions are excluded.
    pub total: usize,
    /// Mean 1/L_valid over the scored scenes: uniform-guess accuracy.
    pub chance: f64,
}

/// Frozen per-scene encodings reused across all candidate pairings.
struct SceneEnc {
    img_states: Tensor,
    txt_states: Tensor,
    txt_positions: Vec<usize>,
    img_proj: Vec<f64>,
    txt_proj: Vec<f64>,
}

fn encode_all(enc: &ToyEncoders, scenes: &[ToyScene], vocab: &Vocab) -> Vec<SceneEnc> {
    scenes
        .iter()
        .map(|scene| {
            let seq = tokenize(&scene.caption, vocab, enc.config.max_len)
                .expect("eval captions tokenize");
            let mut tape = Tape::new();
            let vars = enc.params.constant_vars(&mut tape);
            let img = image_states(&mut tape, &vars, &scene.visual_tokens);
            let txt = text_states(&mut tape, &vars, &seq.ids);
            let img_pool = pool(&mut tape, img);
            let txt_pool = pool(&mut tape, txt);
            let img_proj = project(&mut tape, &vars, "head_v", img_pool);
            let txt_proj = project(&mut tape, &vars, "head_w", txt_pool);
            SceneEnc {
                img_states: tape.value(img).clone(),
                txt_states: tape.value(txt).clone(),
                txt_positions: valid_positions(&non_special_mask(&seq, vocab)),
                img_proj: tape.value(img_proj).row(0).to_vec(),
                txt_proj: tape.value(txt_proj).row(0).to_vec(),
            }
        })
        .collect()
}

/// Match probability from the two-way head: per-position logits over the
/// caption's content tokens, summed, as in training.
fn match_prob(
    enc: &ToyEncoders,
    txt_states: &Tensor,
    txt_positions: &[usize],
    img_states: &Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let vars = enc.params.constant_vars(&mut tape);
    let txt = tape.constant(txt_states.clone());
    let img = tape.constant(img_states.clone());
    let cross = cross_block(&mut tape, &vars, txt, img);
    let rows = tape.gather_rows(cross, txt_positions.to_vec());
    let per_position = ritm_head(&mut tape, &vars, rows);
    let mean = pool(&mut tape, per_position);
    let logits_var = tape.scale(mean, txt_positions.len() as f64);
    let logits = tape.value(logits_var).row(0);
    let m = logits[0].max(logits[1]);
    let (e0, e1) = ((logits[0] - m).exp(), (logits[1] - m).exp());
    e1 / (e0 + e1)
}

/// Candidate indices by descending score; index order breaks exact ties.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Final rank of `truth` after reranking the stage-1 top `k_recall` by match
/// probability. A truth outside the shortlist keeps its stage-1 rank, which
/// is at least `k_recall` and therefore a miss at every reported cutoff.
pub(crate) fn rerank_rank(
    stage1: &[f64],
    truth: usize,
    k_recall: usize,
    mut match_prob: impl FnMut(usize) -> f64,
) -> usize {
    let order = ranked_indices(stage1);
    let k = k_recall.min(order.len());
    let top = &order[..k];
    let Some(_) = top.iter().position(|&j| j == truth) else {
        return order.iter().position(|&j| j == truth).expect("truth is a candidate");
    };
    let probs: Vec<f64> = top.iter().map(|&j| match_prob(j)).collect();
    let mut slots: Vec<usize> = (0..k).collect();
    // stable: tied probabilities keep their stage-1 order
    slots.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    slots.iter().position(|&s| top[s] == truth).expect("truth is in the shortlist")
}

/// Recall@{1,5,10} in both directions over the candidate set `scenes`,
/// stage-1 ranking by uni-modal CLS dot product, stage-2 rerank of the top
/// `k_recall` by matching-head probability.
pub fn eval_retrieval(
    enc: &ToyEncoders,
    scenes: &[ToyScene],
    vocab: &Vocab,
    k_recall: usize,
) -> RetrievalReport {
    let m = scenes.len();
    assert!(m >= 2, "retrieval needs at least two candidates");
    assert!((10..=m).contains(&k_recall), "k_recall must lie in [10, {m}]");
    let encs = encode_all(enc, scenes, vocab);
    let mut hits = [[0usize; 3]; 2];
    for q in 0..m {
        let i2t: Vec<f64> = (0..m).map(|j| dot(&encs[q].img_proj, &encs[j].txt_proj)).collect();
        let rank_i2t = rerank_rank(&i2t, q, k_recall, |j| {
            match_prob(enc, &encs[j].txt_states, &encs[j].txt_positions, &encs[q].img_states)
        });
        let t2i: Vec<f64> = (0..m).map(|j| dot(&encs[q].txt_proj, &encs[j].img_proj)).collect();
        let rank_t2i = rerank_rank(&t2i, q, k_recall, |j| {
            match_prob(enc, &encs[q].txt_states, &encs[q].txt_positions, &encs[j].img_states)
        });
        for (d, rank) in [(0, rank_i2t), (1, rank_t2i)] {
            for (c, cutoff) in [1, 5, 10].into_iter().enumerate() {
                if rank < cutoff {
                    hits[d][c] += 1;
                }
            }
        }
    }
    let frac = |h: usize| h as f64 / m as f64;
    RetrievalReport {
        r1_i2t: frac(hits[0][0]),
        r5_i2t: frac(hits[0][1]),
        r10_i2t: frac(hits[0][2]),
        r1_t2i: frac(hits[1][0]),
        r5_t2i: frac(hits[1][1]),
        r10_t2i: frac(hits[1][2]),
        n: m,
    }
}

/// Rewrites each held-out caption under an eval-only seed stream and scores
/// top-1 position prediction of the substituted word's first wordpiece.
pub fn eval_rlm(
    enc: &ToyEncoders,
    scenes: &[ToyScene],
    res: &TrainResources,
    seed: u64,
) -> RlmReport {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut inv_valid_sum = 0.0;
    for (idx, scene) in scenes.iter().enumerate() {
        let rw_seed = rng::derive_seed(seed, EVAL_RLM + idx as u64);
        let Ok(rw) = rewrite_sentence(
            &scene.caption,
            &res.graph,
            &res.quantifiers,
            &res.function_words,
            rw_seed,
        ) else {
            continue;
        };
        let Ok(seq) = tokenize(&rw.rewritten, &res.vocab, enc.config.max_len) else { continue };
        let Ok(target) = rlm_target(&seq, rw.replaced_index) else { continue };
        let valid = non_special_mask(&seq, &res.vocab);
        if !valid[target.position] {
            continue;
        }
        let mut tape = Tape::new();
        let vars = enc.params.constant_vars(&mut tape);
        let img = image_states(&mut tape, &vars, &scene.visual_tokens);
        let txt = text_states(&mut tape, &vars, &seq.ids);
        let cross = cross_block(&mut tape, &vars, txt, img);
        let logits_var = rlm_head(&mut tape, &vars, cross);
        let logits = tape.value(logits_var);
        let mut pred = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for p in 0..logits.rows() {
            if valid[p] && logits.row(p)[0] > best {
                best = logits.row(p)[0];
                pred = p;
            }
        }
        total += 1;
        inv_valid_sum += 1.0 / valid.iter().filter(|&&v| v).count() as f64;
        if pred == target.position {
            correct += 1;
        }
    }
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let chance = if total == 0 { 0.0 } else { inv_valid_sum / total as f64 };
    RlmReport { accuracy, correct, total, chance }
}
