//! End-to-end training loop over the full five-term objective, plus the
//! composite finite-difference check that certifies the whole model's
//! gradients on a tiny instance.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linguistics::{FunctionWords, QuantifierLexicon};
use crate::losses::{
    self, finite_diff_check, itc_node, momentum_step, ritc_node, ritm_node, sample_hard_negatives,
    GradCheckReport, HardNegatives, LossError, MomentumQueue,
};
use crate::rewriter::{rewrite_random_word, rewrite_sentence};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{
    apply_mlm_mask, rlm_target, tokenize, MaskPolicy, MaskedSeq, RlmTarget, TokenSeq,
    TokenizerError, Vocab,
};
use crate::toymodel::corpus::{
    generate_toy_corpus, pluralize, ToyScene, COLORS, COUNTS, N_SYMBOLS, SHAPES,
};
use crate::toymodel::encoders::{
    cross_block, image_states, mlm_head, pool, project, ritm_head, rlm_head, text_states,
    ModelConfig, ParamVars, Params, ToyEncoders,
};
use crate::toymodel::eval::{eval_retrieval, eval_rlm, RetrievalReport, RlmReport};
use crate::wordnet::WordNetGraph;

// Seed-stream namespaces. Per-sample streams use BASE + index, so every
// stochastic decision is replayable in isolation and independent of epoch.
const REWRITE_CLEAN: u64 = 0x1_0000_0000;
const REWRITE_NOISY: u64 = 0x2_0000_0000;
const MASK_CLEAN: u64 = 0x3_0000_0000;
const MASK_NOISY: u64 = 0x4_0000_0000;
const SHUFFLE: u64 = 0x5_0000_0000;
const HARDNEG: u64 = 0x6_0000_0000;
pub(crate) const EVAL_RLM: u64 = 0x7_0000_0000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metrics serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything the trainer reads besides the config.
pub struct TrainResources {
    pub graph: WordNetGraph,
    pub quantifiers: QuantifierLexicon,
    pub function_words: FunctionWords,
    pub vocab: Vocab,
}

impl TrainResources {
    pub fn bundled() -> Self {
        TrainResources {
            graph: crate::resources::micro_graph(),
            quantifiers: crate::resources::default_quantifiers(),
            function_words: crate::resources::default_function_words(),
            vocab: crate::resources::micro_vocab(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub beta: f64,
    pub temperature_init: f64,
    pub momentum: f64,
    /// Fraction of epochs trained on the noisy caption split (stage 1).
    pub stage_noisy_frac: f64,
    /// Word-dropout rate applied when generating the noisy captions.
    pub noise_rate: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub max_len: usize,
    pub k_recall: usize,
    pub d: usize,
    pub proj: usize,
    pub ff: usize,
    /// Run retrieval/RLM eval every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub disable_ritc: bool,
    pub disable_ritm: bool,
    pub disable_rlm: bool,
    /// Skip rewriting entirely; every rewrite-dependent term drops out.
    pub disable_hsr: bool,
    /// Substitute a uniformly random corpus word instead of a lexically
    /// related one.
    pub hsr_random_word: bool,
    pub ritc_paper_sign: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 50,
            lr: 1e-2,
            weight_decay: 0.02,
            batch_size: 32,
            queue_capacity: 128,
            beta: 0.2,
            temperature_init: 0.07,
            momentum: 0.995,
            stage_noisy_frac: 0.8,
            noise_rate: 0.1,
            n_train: 2000,
            n_eval: 200,
            max_len: 16,
            k_recall: 16,
            d: 40,
            proj: 28,
            ff: 96,
            eval_every: 0,
            disable_ritc: false,
            disable_ritm: false,
            disable_rlm: false,
            disable_hsr: false,
            hsr_random_word: false,
            ritc_paper_sign: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch size must be >= 2 for in-batch negatives".into());
        }
        if self.n_train < self.batch_size {
            return fail(format!(
                "n_train {} smaller than batch size {}",
                self.n_train, self.batch_size
            ));
        }
        if self.n_eval == 0 {
            return fail("n_eval must be >= 1".into());
        }
        if !(self.temperature_init > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature_init));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.stage_noisy_frac) {
            return fail(format!("stage fraction {} outside [0, 1]", self.stage_noisy_frac));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.beta < 0.0 {
            return fail("lr, weight decay, and beta must be non-negative".into());
        }
        if self.k_recall < 10 || self.k_recall > self.n_eval {
            return fail(format!(
                "k_recall {} must lie in [10, n_eval = {}]",
                self.k_recall, self.n_eval
            ));
        }
        if self.max_len < 4 || self.d == 0 || self.proj == 0 || self.ff == 0 {
            return fail("model dimensions must be positive and max_len >= 4".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            d: self.d,
            proj: self.proj,
            ff: self.ff,
            n_symbols: N_SYMBOLS,
            vocab_size: vocab.len(),
            max_len: self.max_len,
        }
    }
}

/// One step/eval record of the metrics timeline; absent values are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub itc: Option<f64>,
    pub ritc: Option<f64>,
    pub ritm: Option<f64>,
    pub mlm: Option<f64>,
    pub rlm: Option<f64>,
    pub total: Option<f64>,
    pub r1_i2t: Option<f64>,
    pub r1_t2i: Option<f64>,
    pub rlm_acc: Option<f64>,
}

impl MetricsRecord {
    fn empty(epoch: usize, step: usize) -> Self {
        MetricsRecord {
            epoch,
            step,
            itc: None,
            ritc: None,
            ritm: None,
            mlm: None,
            rlm: None,
            total: None,
            r1_i2t: None,
            r1_t2i: None,
            rlm_acc: None,
        }
    }
}

fn emit(
    record: MetricsRecord,
    metrics: &mut dyn Write,
    timeline: &mut Vec<MetricsRecord>,
) -> Result<(), TrainError> {
    writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
    timeline.push(record);
    Ok(())
}

/// Rewrite-dependent half of a prepared caption.
#[derive(Debug, Clone)]
pub(crate) struct RewrittenPart {
    pub seq: TokenSeq,
    pub valid: Vec<bool>,
    pub rlm: Option<RlmTarget>,
}

/// One caption fully prepared for a step: tokens, mask, rewrite.
#[derive(Debug, Clone)]
pub(crate) struct PreparedVariant {
    pub seq: TokenSeq,
    pub valid: Vec<bool>,
    pub masked: MaskedSeq,
    pub rewritten: Option<RewrittenPart>,
}

#[derive(Debug, Clone)]
struct PreparedSample {
    clean: PreparedVariant,
    noisy: PreparedVariant,
}

pub(crate) fn non_special_mask(seq: &TokenSeq, vocab: &Vocab) -> Vec<bool> {
    seq.ids.iter().map(|&id| !vocab.is_special(id)).collect()
}

pub(crate) fn valid_positions(valid: &[bool]) -> Vec<usize> {
    (0..valid.len()).filter(|&p| valid[p]).collect()
}

/// Substitution pool for random-word rewriting: every whole-word entry of the
/// model vocabulary. Unlike the sibling rewriter this ignores part of speech
/// and scene plausibility, so most draws are detectable from the text alone.
fn random_word_pool(vocab: &Vocab) -> Vec<String> {
    (0..vocab.len() as u32)
        .filter(|&id| !vocab.is_special(id))
        .filter_map(|id| vocab.token(id))
        .filter(|t| !t.starts_with("##") && t.chars().any(|c| c.is_ascii_alphabetic()))
        .map(str::to_string)
        .collect()
}

fn prepare_variant(
    caption: &str,
    res: &TrainResources,
    cfg: &TrainConfig,
    pool: &[String],
    rewrite_seed: u64,
    mask_seed: u64,
) -> Result<PreparedVariant, TrainError> {
    let seq = tokenize(caption, &res.vocab, cfg.max_len)?;
    let valid = non_special_mask(&seq, &res.vocab);
    // NoCandidate is the only rewrite failure; the sample then simply skips
    // the rewrite-dependent terms.
    let rewrite = if cfg.disable_hsr {
        None
    } else if cfg.hsr_random_word {
        rewrite_random_word(caption, pool, rewrite_seed).ok()
    } else {
        rewrite_sentence(caption, &res.graph, &res.quantifiers, &res.function_words, rewrite_seed)
            .ok()
    };
    let mut forced_span = None;
    let rewritten = match &rewrite {
        None => None,
        Some(r) => {
            forced_span = seq.span_of(r.replaced_index);
            let rew_seq = tokenize(&r.rewritten, &res.vocab, cfg.max_len)?;
            let rew_valid = non_special_mask(&rew_seq, &res.vocab);
            let rlm =
                rlm_target(&rew_seq, r.replaced_index).ok().filter(|t| rew_valid[t.position]);
            Some(RewrittenPart { seq: rew_seq, valid: rew_valid, rlm })
        }
    };
    let masked = apply_mlm_mask(&seq, forced_span, &res.vocab, &MaskPolicy::default(), mask_seed)?;
    Ok(PreparedVariant { seq, valid, masked, rewritten })
}

fn prepare_sample(
    idx: usize,
    scene: &ToyScene,
    res: &TrainResources,
    cfg: &TrainConfig,
    pool: &[String],
) -> Result<PreparedSample, TrainError> {
    let i = idx as u64;
    let clean = prepare_variant(
        &scene.caption,
        res,
        cfg,
        pool,
        rng::derive_seed(cfg.seed, REWRITE_CLEAN + i),
        rng::derive_seed(cfg.seed, MASK_CLEAN + i),
    )?;
    let noisy = if scene.noisy_caption == scene.caption {
        clean.clone()
    } else {
        prepare_variant(
            &scene.noisy_caption,
            res,
            cfg,
            pool,
            rng::derive_seed(cfg.seed, REWRITE_NOISY + i),
            rng::derive_seed(cfg.seed, MASK_NOISY + i),
        )?
    };
    Ok(PreparedSample { clean, noisy })
}

/// One sample's view for a step.
pub(crate) struct BatchItem<'a> {
    pub symbols: &'a [usize],
    pub variant: &'a PreparedVariant,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Switches {
    pub ritc: bool,
    pub ritm: bool,
    pub rlm: bool,
    pub beta: f64,
    pub paper_sign: bool,
}

impl Switches {
    fn of(cfg: &TrainConfig) -> Self {
        Switches {
            ritc: !cfg.disable_ritc,
            ritm: !cfg.disable_ritm,
            rlm: !cfg.disable_rlm,
            beta: cfg.beta,
            paper_sign: cfg.ritc_paper_sign,
        }
    }
}

/// The batch loss graph plus per-component nodes and degeneracy diagnostics.
pub(crate) struct Composite {
    pub total: Var,
    pub itc: Var,
    pub ritc: Option<Var>,
    pub ritm: Option<Var>,
    pub mlm: Option<Var>,
    pub rlm: Option<Var>,
    /// Per rewritten sample: the hinge argument actually used. Values near
    /// zero sit on the kink of the piecewise-smooth loss.
    pub ritc_margins: Vec<f64>,
    /// Per rewritten sample: distance between the two smallest similarities
    /// on either side; near-ties make the min kink-sensitive.
    pub ritc_min_gaps: Vec<f64>,
    /// The RITM negatives actually used, if any were drawn.
    pub negatives: Option<HardNegatives>,
}

/// Where the RITM hard negatives come from. Training samples them from the
/// in-batch similarity matrix; the gradient check pins an earlier draw,
/// because the sampled indices are a discontinuous function of the
/// parameters and must not flip between perturbed evaluations.
pub(crate) enum Negatives {
    Sample(u64),
    Fixed(HardNegatives),
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Var {
    let s = tape.sum_scalars(parts);
    tape.scale(s, 1.0 / parts.len() as f64)
}

/// Distance from the minimum to the runner-up; infinite without one.
fn runner_up_gap(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() < 2 {
        f64::INFINITY
    } else {
        s[1] - s[0]
    }
}

/// Builds the full batch objective on one tape. Shared between the training
/// step and the composite gradient check.
pub(crate) fn build_composite(
    tape: &mut Tape,
    vars: &ParamVars,
    items: &[BatchItem],
    txt_queue: Option<Var>,
    img_queue: Option<Var>,
    sw: &Switches,
    negatives: &Negatives,
) -> Result<Composite, LossError> {
    let n = items.len();
    assert!(n >= 2, "composite needs at least two samples");

    // uni-modal states and CLS projections
    let mut img_states_all = Vec::with_capacity(n);
    let mut txt_states_all = Vec::with_capacity(n);
    let mut img_projs = Vec::with_capacity(n);
    let mut txt_projs = Vec::with_capacity(n);
    for item in items {
        let img = image_states(tape, vars, item.symbols);
        let txt = text_states(tape, vars, &item.variant.seq.ids);
        let img_pool = pool(tape, img);
        let txt_pool = pool(tape, txt);
        img_projs.push(project(tape, vars, "head_v", img_pool));
        txt_projs.push(project(tape, vars, "head_w", txt_pool));
        img_states_all.push(img);
        txt_states_all.push(txt);
    }
    let text_mat = tape.stack_rows(&txt_projs);
    let img_mat = tape.stack_rows(&img_projs);
    let itc = itc_node(tape, text_mat, img_mat, txt_queue, img_queue, vars["log_temp"]);

    // rewritten text states, shared by RITC, RITM, and RLM
    let rewritten_states: Vec<Option<Var>> = items
        .iter()
        .map(|item| item.variant.rewritten.as_ref().map(|r| text_states(tape, vars, &r.seq.ids)))
        .collect();
    let cross_rewritten: Vec<Option<Var>> = if sw.ritm || sw.rlm {
        rewritten_states
            .iter()
            .enumerate()
            .map(|(i, s)| s.map(|txt| cross_block(tape, vars, txt, img_states_all[i])))
            .collect()
    } else {
        vec![None; n]
    };

    let mut ritc = None;
    let mut ritc_margins = Vec::new();
    let mut ritc_min_gaps = Vec::new();
    if sw.ritc {
        let mut parts = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let Some(rew) = &item.variant.rewritten else { continue };
            let tok_projs = project(tape, vars, "head_w", txt_states_all[i]);
            let rew_projs = project(tape, vars, "head_w", rewritten_states[i].unwrap());
            // kink diagnostics from forward values only
            let img_v = tape.value(img_projs[i]).row(0).to_vec();
            let sims = |m: &Tensor, mask: &[bool]| -> Vec<f64> {
                (0..m.rows())
                    .zip(mask)
                    .filter(|&(_, &ok)| ok)
                    .map(|(r, _)| crate::tensor::dot(m.row(r), &img_v))
                    .collect()
            };
            let g = sims(tape.value(tok_projs), &item.variant.valid);
            let gh = sims(tape.value(rew_projs), &rew.valid);
            let min_g = g.iter().copied().fold(f64::INFINITY, f64::min);
            let min_gh = gh.iter().copied().fold(f64::INFINITY, f64::min);
            let arg = if sw.paper_sign { min_g - min_gh } else { min_gh - min_g };
            ritc_margins.push(sw.beta + arg);
            ritc_min_gaps.push(runner_up_gap(&g).min(runner_up_gap(&gh)));
            parts.push(ritc_node(
                tape,
                img_projs[i],
                tok_projs,
                &item.variant.valid,
                rew_projs,
                &rew.valid,
                sw.beta,
                sw.paper_sign,
            ));
        }
        if !parts.is_empty() {
            ritc = Some(mean_of(tape, &parts));
        }
    }

    let mut ritm = None;
    let mut negs_used = None;
    if sw.ritm {
        let negs = match negatives {
            Negatives::Sample(seed) => {
                let sim = mining_similarity(tape, img_mat, text_mat, MINING_INV_TEMP);
                sample_hard_negatives(&sim, *seed)?
            }
            Negatives::Fixed(negs) => negs.clone(),
        };
        let positions: Vec<Vec<usize>> = items
            .iter()
            .map(|item| valid_positions(&item.variant.valid))
            .collect();
        // One pair of match logits per content position, summed: per-word
        // log-evidence adds up. Pooling states before the head buries each
        // position's evidence in a sum over the whole caption, and a mean
        // over logits divides every position's gradient by caption length.
        let match_row = |tape: &mut Tape, txt: Var, img: Var, pos: &[usize]| {
            let cross = cross_block(tape, vars, txt, img);
            let rows = tape.gather_rows(cross, pos.to_vec());
            let logits = ritm_head(tape, vars, rows);
            let mean = pool(tape, logits);
            tape.scale(mean, pos.len() as f64)
        };
        let mut pos_rows = Vec::with_capacity(n);
        for i in 0..n {
            pos_rows.push(match_row(tape, txt_states_all[i], img_states_all[i], &positions[i]));
        }
        let mut hard_rows = Vec::with_capacity(2 * n);
        for (i, &j) in negs.text_for_image.iter().enumerate() {
            hard_rows.push(match_row(tape, txt_states_all[j], img_states_all[i], &positions[j]));
        }
        for (j, &i) in negs.image_for_text.iter().enumerate() {
            hard_rows.push(match_row(tape, txt_states_all[j], img_states_all[i], &positions[j]));
        }
        let mut rew_rows = Vec::new();
        for (i, cross) in cross_rewritten.iter().enumerate() {
            let Some(cross) = cross else { continue };
            let rew = items[i].variant.rewritten.as_ref().unwrap();
            let pos = valid_positions(&rew.valid);
            let rows = tape.gather_rows(*cross, pos.clone());
            let logits = ritm_head(tape, vars, rows);
            let mean = pool(tape, logits);
            rew_rows.push(tape.scale(mean, pos.len() as f64));
        }
        let pos = tape.stack_rows(&pos_rows);
        let hard = tape.stack_rows(&hard_rows);
        let mut groups = vec![(pos, true), (hard, false)];
        if !rew_rows.is_empty() {
            let rew = tape.stack_rows(&rew_rows);
            groups.push((rew, false));
        }
        ritm = Some(ritm_node(tape, &groups));
        negs_used = Some(negs);
    }

    // MLM over every labeled position in the batch at once
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let masked = &item.variant.masked;
        let positions: Vec<usize> =
            (0..masked.mlm_labels.len()).filter(|&p| masked.mlm_labels[p].is_some()).collect();
        if positions.is_empty() {
            continue;
        }
        let txt = text_states(tape, vars, &masked.ids);
        let cross = cross_block(tape, vars, txt, img_states_all[i]);
        mlm_targets.extend(positions.iter().map(|&p| masked.mlm_labels[p].unwrap() as usize));
        mlm_rows.push(tape.gather_rows(cross, positions));
    }
    let mlm = if mlm_rows.is_empty() {
        None
    } else {
        let mut all = mlm_rows[0];
        for &r in &mlm_rows[1..] {
            all = tape.concat_rows(all, r);
        }
        let logits = mlm_head(tape, vars, all);
        Some(tape.nll_rows_mean(logits, mlm_targets))
    };

    let mut rlm = None;
    if sw.rlm {
        let mut parts = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let Some(rew) = &item.variant.rewritten else { continue };
            let Some(target) = &rew.rlm else { continue };
            let logits = rlm_head(tape, vars, cross_rewritten[i].unwrap());
            parts.push(tape.masked_nll(logits, rew.valid.clone(), target.position));
        }
        if !parts.is_empty() {
            rlm = Some(mean_of(tape, &parts));
        }
    }

    let mut present = vec![itc];
    present.extend([ritc, ritm, mlm, rlm].into_iter().flatten());
    let total = tape.sum_scalars(&present);
    Ok(Composite {
        total,
        itc,
        ritc,
        ritm,
        mlm,
        rlm,
        ritc_margins,
        ritc_min_gaps,
        negatives: negs_used,
    })
}

/// Fixed sharpness for hard-negative mining. Raw cosines in [-1, 1] are too
/// flat for the exponential weights to prefer anything; a sharp fixed value
/// concentrates draws on in-batch nearest neighbours, which is what the
/// matching head faces when it re-ranks a retrieval shortlist. Decoupled from
/// the learned contrastive temperature so the mining distribution does not
/// drift with it.
const MINING_INV_TEMP: f64 = 12.0;

/// Values-only temperature-sharpened similarity matrix for negative mining.
fn mining_similarity(tape: &Tape, img_mat: Var, text_mat: Var, inv_temp: f64) -> Tensor {
    let img = tape.value(img_mat);
    let txt = tape.value(text_mat);
    let n = img.rows();
    let mut sim = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            sim.row_mut(i)[j] = inv_temp * crate::tensor::dot(img.row(i), txt.row(j));
        }
    }
    sim
}

/// Keys per-batch stochasticity to the batch's sample indices, so identical
/// batches replay identical draws regardless of when they occur.
fn batch_seed(seed: u64, indices: &[usize]) -> u64 {
    let key = indices.iter().fold(HARDNEG, |acc, &i| rng::derive_seed(acc, i as u64));
    rng::derive_seed(seed, key)
}

/// Bounds on the learnable log-temperature. Unbounded, late training lets
/// the temperature collapse, and at extreme sharpness hairline margins
/// satisfy the contrastive loss while the update step turns unstable.
const LOG_TEMP_MIN: f64 = -2.8134107167600364; // ln 0.06
const LOG_TEMP_MAX: f64 = 0.0; // ln 1

/// Gradient step with decoupled weight decay on the non-embedding matrices.
fn apply_update(params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64, wd: f64) {
    if lr == 0.0 {
        return;
    }
    for (name, g) in grads {
        params.get_mut(name).add_scaled(g, -lr);
    }
    if wd > 0.0 {
        let decayed: Vec<String> =
            params.names().filter(|n| Params::is_decayed(n)).map(str::to_string).collect();
        for name in decayed {
            for x in params.get_mut(&name).data_mut() {
                *x -= lr * wd * *x;
            }
        }
    }
    for x in params.get_mut("log_temp").data_mut() {
        *x = x.clamp(LOG_TEMP_MIN, LOG_TEMP_MAX);
    }
}

/// Momentum-encoder projections of the current batch, for the queues.
fn momentum_projections(momentum: &Params, items: &[BatchItem]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = momentum.constant_vars(&mut tape);
    let mut txt_rows = Vec::with_capacity(items.len());
    let mut img_rows = Vec::with_capacity(items.len());
    for item in items {
        let img = image_states(&mut tape, &vars, item.symbols);
        let txt = text_states(&mut tape, &vars, &item.variant.seq.ids);
        let img_pool = pool(&mut tape, img);
        let txt_pool = pool(&mut tape, txt);
        img_rows.push(project(&mut tape, &vars, "head_v", img_pool));
        txt_rows.push(project(&mut tape, &vars, "head_w", txt_pool));
    }
    let t = tape.stack_rows(&txt_rows);
    let i = tape.stack_rows(&img_rows);
    (tape.value(t).clone(), tape.value(i).clone())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoders: ToyEncoders,
    pub timeline: Vec<MetricsRecord>,
    pub retrieval: RetrievalReport,
    pub rlm: RlmReport,
}

/// Trains the toy model end to end, streaming one JSONL metrics record per
/// step plus one per evaluation. Unrewritable captions never abort a run;
/// the affected sample simply contributes no rewrite-dependent terms.
pub fn train_run(
    cfg: &TrainConfig,
    res: &TrainResources,
    metrics: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let corpus = generate_toy_corpus(cfg.seed, cfg.n_train, cfg.n_eval, cfg.noise_rate);
    let model_cfg = cfg.model_config(&res.vocab);
    let mut enc = ToyEncoders::new(model_cfg, cfg.seed, cfg.temperature_init.ln());
    let pool_words = random_word_pool(&res.vocab);
    let prepared: Vec<PreparedSample> = corpus
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| prepare_sample(i, s, res, cfg, &pool_words))
        .collect::<Result<_, _>>()?;
    let mut txt_queue = MomentumQueue::new(cfg.queue_capacity, cfg.proj);
    let mut img_queue = MomentumQueue::new(cfg.queue_capacity, cfg.proj);
    let sw = Switches::of(cfg);
    let momentum_names: Vec<String> = enc.momentum.names().map(str::to_string).collect();
    let noisy_epochs = (cfg.epochs as f64 * cfg.stage_noisy_frac).round() as usize;

    let run_eval = |enc: &ToyEncoders| -> (RetrievalReport, RlmReport) {
        let retrieval = eval_retrieval(enc, &corpus.eval, &res.vocab, cfg.k_recall);
        let rlm = eval_rlm(enc, &corpus.eval, res, cfg.seed);
        (retrieval, rlm)
    };

    let mut timeline = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let noisy = epoch <= noisy_epochs;
        let mut order: Vec<usize> = (0..cfg.n_train).collect();
        order.shuffle(&mut rng::derived_stream(cfg.seed, SHUFFLE + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                continue;
            }
            // within-batch order is irrelevant to the objective; canonicalize
            // it so identical batches produce bitwise-identical arithmetic
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| BatchItem {
                    symbols: &corpus.train[i].visual_tokens,
                    variant: if noisy { &prepared[i].noisy } else { &prepared[i].clean },
                })
                .collect();
            let mut tape = Tape::new();
            let vars = enc.params.leaf_vars(&mut tape);
            let tq = (!txt_queue.is_empty()).then(|| tape.constant(txt_queue.as_tensor()));
            let iq = (!img_queue.is_empty()).then(|| tape.constant(img_queue.as_tensor()));
            let comp = build_composite(
                &mut tape,
                &vars,
                &items,
                tq,
                iq,
                &sw,
                &Negatives::Sample(batch_seed(cfg.seed, &batch)),
            )?;

            let mut record = MetricsRecord::empty(epoch, step);
            let val = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item());
            record.itc = Some(tape.value(comp.itc).item());
            record.ritc = val(&tape, comp.ritc);
            record.ritm = val(&tape, comp.ritm);
            record.mlm = val(&tape, comp.mlm).or(Some(0.0));
            record.rlm = val(&tape, comp.rlm);
            record.total = Some(tape.value(comp.total).item());

            let mut grads = tape.backward(comp.total);
            let by_name: BTreeMap<String, Tensor> = vars
                .iter()
                .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
                .collect();
            apply_update(&mut enc.params, &by_name, cfg.lr, cfg.weight_decay);
            for name in &momentum_names {
                momentum_step(enc.params.get(name), enc.momentum.get_mut(name), cfg.momentum)?;
            }
            if cfg.queue_capacity > 0 {
                let (tproj, iproj) = momentum_projections(&enc.momentum, &items);
                txt_queue.push_batch(&tproj)?;
                img_queue.push_batch(&iproj)?;
            }
            emit(record, metrics, &mut timeline)?;
            step += 1;
        }
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && epoch != cfg.epochs {
            let (retrieval, rlm) = run_eval(&enc);
            let mut record = MetricsRecord::empty(epoch, step);
            record.r1_i2t = Some(retrieval.r1_i2t);
            record.r1_t2i = Some(retrieval.r1_t2i);
            record.rlm_acc = Some(rlm.accuracy);
            emit(record, metrics, &mut timeline)?;
        }
    }

    let (retrieval, rlm) = run_eval(&enc);
    let mut record = MetricsRecord::empty(cfg.epochs, step);
    record.r1_i2t = Some(retrieval.r1_i2t);
    record.r1_t2i = Some(retrieval.r1_t2i);
    record.rlm_acc = Some(rlm.accuracy);
    emit(record, metrics, &mut timeline)?;

    Ok(TrainOutcome { encoders: enc, timeline, retrieval, rlm })
}

// ---------------------------------------------------------------------------
// Composite gradient verification on a tiny instance.

const TINY_VOCAB: &str =
    "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\none\ntwo\nred\nblue\ndog\ncat\n##s\nand\n";

struct TinyInstance {
    cfg: ModelConfig,
    items_data: Vec<(Vec<usize>, PreparedVariant)>,
    txt_queue: Tensor,
    img_queue: Tensor,
}

fn tiny_instance(seed: u64) -> TinyInstance {
    let vocab = Vocab::parse(TINY_VOCAB).expect("tiny vocabulary is well-formed");
    let cfg =
        ModelConfig { d: 4, proj: 3, ff: 5, n_symbols: 8, vocab_size: vocab.len(), max_len: 12 };
    let policy = MaskPolicy { rate: 0.25, mask_prob: 0.8, random_prob: 0.1 };
    let build = |caption: &str, rewritten: &str, symbols: Vec<usize>, mask_seed: u64| {
        let seq = tokenize(caption, &vocab, cfg.max_len).unwrap();
        let valid = non_special_mask(&seq, &vocab);
        let rew_seq = tokenize(rewritten, &vocab, cfg.max_len).unwrap();
        let rew_valid = non_special_mask(&rew_seq, &vocab);
        let rlm = rlm_target(&rew_seq, 2).ok().filter(|t| rew_valid[t.position]);
        let forced = seq.span_of(2);
        let masked = apply_mlm_mask(&seq, forced, &vocab, &policy, mask_seed).unwrap();
        (
            symbols,
            PreparedVariant {
                seq,
                valid,
                masked,
                rewritten: Some(RewrittenPart { seq: rew_seq, valid: rew_valid, rlm }),
            },
        )
    };
    let items_data = vec![
        build("one red dog and two blue cats", "one red cat and two blue cats", vec![0, 5], 11),
        build("two blue cats and one red dog", "two blue dogs and one red dog", vec![2, 7], 12),
    ];
    let mut rng = rng::derived_stream(seed, 0x71);
    let mut unit_rows = |rows: usize, cols: usize| {
        let mut t = Tensor::zeros(vec![rows, cols]);
        for i in 0..rows {
            for x in t.row_mut(i) {
                *x = rng::normal(&mut rng);
            }
            crate::tensor::l2_normalize(t.row_mut(i));
        }
        t
    };
    let txt_queue = unit_rows(2, cfg.proj);
    let img_queue = unit_rows(2, cfg.proj);
    TinyInstance { cfg, items_data, txt_queue, img_queue }
}

fn tiny_composite(
    instance: &TinyInstance,
    params: &Params,
    negatives: &Negatives,
) -> (f64, Composite, Tape, ParamVars) {
    let mut tape = Tape::new();
    let vars = params.leaf_vars(&mut tape);
    let tq = tape.constant(instance.txt_queue.clone());
    let iq = tape.constant(instance.img_queue.clone());
    let items: Vec<BatchItem> = instance
        .items_data
        .iter()
        .map(|(symbols, variant)| BatchItem { symbols, variant })
        .collect();
    let sw = Switches { ritc: true, ritm: true, rlm: true, beta: 0.2, paper_sign: false };
    let comp = build_composite(&mut tape, &vars, &items, Some(tq), Some(iq), &sw, negatives)
        .expect("tiny batch is well-formed");
    let value = tape.value(comp.total).item();
    (value, comp, tape, vars)
}

/// Finite-difference check of the whole training objective with respect to
/// every model parameter, at `points` random non-degenerate parameter draws.
pub fn composite_grad_check(seed: u64, points: usize, h: f64) -> GradCheckReport {
    let instance = tiny_instance(seed);
    let mut max_rel_err = 0.0f64;
    let mut n_params = 0;
    for point in 0..points {
        // resample until clear of the RITC hinge kink and of tied minima,
        // then pin the sampled negatives so perturbations cannot flip them
        let mut draw = 0u64;
        let (params, negatives) = loop {
            let p = Params::init(
                &instance.cfg,
                rng::derive_seed(seed, (point as u64) << 16 | draw),
                -2.0 + 0.05 * ((point as u64 + draw) % 8) as f64,
            );
            let (_, comp, _, _) = tiny_composite(&instance, &p, &Negatives::Sample(17));
            let clear = comp.ritc_margins.iter().all(|m| m.abs() > 1e-3)
                && comp.ritc_min_gaps.iter().all(|g| *g > 1e-3);
            if clear {
                let negs = comp.negatives.expect("tiny composite always runs the matching term");
                break (p, Negatives::Fixed(negs));
            }
            draw += 1;
        };
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).clone()).collect();
        n_params = inputs.iter().map(Tensor::len).sum();
        let f = |xs: &[Tensor]| {
            let map: BTreeMap<String, Tensor> =
                names.iter().cloned().zip(xs.iter().cloned()).collect();
            let p = Params::from_map(map);
            let (value, comp, mut tape, vars) = tiny_composite(&instance, &p, &negatives);
            let mut grads = tape.backward(comp.total);
            let gs: Vec<Tensor> = names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    grads.take(vars[n]).unwrap_or_else(|| Tensor::zeros(xs[i].shape().to_vec()))
                })
                .collect();
            (value, gs)
        };
        max_rel_err = max_rel_err.max(finite_diff_check(f, &inputs, h));
    }
    GradCheckReport {
        name: "composite",
        dims: format!("{n_params} parameters, N=2 M=2"),
        points,
        max_rel_err,
    }
}

/// The five per-objective reports plus the composite, in that order.
pub fn full_grad_check(seed: u64, points: usize, h: f64) -> Vec<GradCheckReport> {
    let mut reports = losses::grad_check_suite(seed, points, h);
    reports.push(composite_grad_check(seed, points, h));
    reports
}
