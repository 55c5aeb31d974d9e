//! The toy two-stream model: embedding-table encoders for both modalities,
//! one cross-attention block for the multimodal states, and the five heads.
//! Parameters live in a flat named map so the optimizer, momentum copy, and
//! checkpoints all speak the same language.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSeq;
use crate::toymodel::corpus::ToyScene;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("input does not match the model vocabulary: {0}")]
    VocabMismatch(String),
}

/// Architecture dimensions. `d` is the shared hidden width, `proj` the
/// projection-head output D, `ff` the feed-forward width of the cross block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub proj: usize,
    pub ff: usize,
    pub n_symbols: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

/// (name, kind) table defining every parameter tensor. Uni-modal entries are
/// mirrored into the momentum copy.
const UNI_MODAL: [&str; 11] = [
    "vis_embed",
    "vis_proj_w",
    "vis_proj_b",
    "txt_embed",
    "txt_pos",
    "txt_proj_w",
    "txt_proj_b",
    "head_v_w",
    "head_v_b",
    "head_w_w",
    "head_w_b",
];

/// Weight matrices subject to decoupled weight decay (embedding and lookup
/// tables, biases, and the temperature are exempt).
const DECAYED: [&str; 14] = [
    "vis_proj_w",
    "txt_proj_w",
    "head_v_w",
    "head_w_w",
    "cross_v_w",
    "cross_o_w",
    "cross_s_w",
    "ff1_w",
    "ff2_w",
    "ritm_w",
    "ritm_o_w",
    "mlm_w",
    "rlm_w",
    "rlm_o_w",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

pub(crate) type ParamVars = BTreeMap<String, Var>;

impl Params {
    /// Deterministic initialization: embedding tables N(0, 0.5), weight
    /// matrices N(0, 1/sqrt(fan_in)), biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64, log_temp: f64) -> Self {
        let d = cfg.d;
        let mut rng = rng::derived_stream(seed, 0x7061);
        let mut tensors = BTreeMap::new();
        let mut table = |name: &str, rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols).map(|_| scale * rng::normal(&mut rng)).collect();
            tensors.insert(name.to_string(), Tensor::matrix(rows, cols, data));
        };
        table("vis_embed", cfg.n_symbols, d, 0.5);
        table("vis_proj_w", d, d, 1.0 / (d as f64).sqrt());
        table("txt_embed", cfg.vocab_size, d, 0.5);
        table("txt_pos", cfg.max_len, d, 0.5);
        table("txt_proj_w", d, d, 1.0 / (d as f64).sqrt());
        table("head_v_w", d, cfg.proj, 1.0 / (d as f64).sqrt());
        table("head_w_w", d, cfg.proj, 1.0 / (d as f64).sqrt());
        table("cross_v_w", d, d, 1.0 / (d as f64).sqrt());
        table("cross_o_w", d, d, 1.0 / (d as f64).sqrt());
        table("cross_s_w", 1, d, 1.0);
        table("ff1_w", d, cfg.ff, 1.0 / (d as f64).sqrt());
        table("ff2_w", cfg.ff, d, 1.0 / (cfg.ff as f64).sqrt());
        table("ritm_w", d, cfg.ff, 1.0 / (d as f64).sqrt());
        table("ritm_o_w", cfg.ff, 2, 1.0 / (cfg.ff as f64).sqrt());
        table("mlm_w", d, cfg.vocab_size, 1.0 / (d as f64).sqrt());
        table("rlm_w", d, cfg.ff, 1.0 / (d as f64).sqrt());
        table("rlm_o_w", cfg.ff, 1, 1.0 / (cfg.ff as f64).sqrt());
        tensors.insert("vis_proj_b".into(), Tensor::zeros(vec![d]));
        tensors.insert("txt_proj_b".into(), Tensor::zeros(vec![d]));
        tensors.insert("head_v_b".into(), Tensor::zeros(vec![cfg.proj]));
        tensors.insert("head_w_b".into(), Tensor::zeros(vec![cfg.proj]));
        tensors.insert("ff1_b".into(), Tensor::zeros(vec![cfg.ff]));
        tensors.insert("ff2_b".into(), Tensor::zeros(vec![d]));
        tensors.insert("ritm_b".into(), Tensor::zeros(vec![cfg.ff]));
        tensors.insert("ritm_o_b".into(), Tensor::zeros(vec![2]));
        tensors.insert("mlm_b".into(), Tensor::zeros(vec![cfg.vocab_size]));
        tensors.insert("rlm_b".into(), Tensor::zeros(vec![cfg.ff]));
        tensors.insert("rlm_o_b".into(), Tensor::zeros(vec![1]));
        tensors.insert("log_temp".into(), Tensor::scalar(log_temp));
        Params { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Params { tensors }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Momentum copy: the uni-modal encoder and projection-head subset.
    pub fn uni_modal_clone(&self) -> Params {
        let tensors =
            UNI_MODAL.iter().map(|&n| (n.to_string(), self.tensors[n].clone())).collect();
        Params { tensors }
    }

    pub fn is_decayed(name: &str) -> bool {
        DECAYED.contains(&name)
    }

    pub(crate) fn leaf_vars(&self, tape: &mut Tape) -> ParamVars {
        self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect()
    }

    pub(crate) fn constant_vars(&self, tape: &mut Tape) -> ParamVars {
        self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect()
    }
}

fn v(vars: &ParamVars, name: &str) -> Var {
    vars[name]
}

/// x [n, in] -> tanh(x W + b).
fn affine_tanh(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    let y = tape.add_row_broadcast(y, b);
    tape.tanh(y)
}

/// Visual token states I^u: embedding rows through the per-token projection.
pub(crate) fn image_states(tape: &mut Tape, vars: &ParamVars, symbols: &[usize]) -> Var {
    let rows = tape.gather_rows(v(vars, "vis_embed"), symbols.to_vec());
    affine_tanh(tape, rows, v(vars, "vis_proj_w"), v(vars, "vis_proj_b"))
}

/// Text token states T^u: token embedding plus learned positional offset,
/// through the per-token projection.
pub(crate) fn text_states(tape: &mut Tape, vars: &ParamVars, ids: &[u32]) -> Var {
    let tok = tape.gather_rows(v(vars, "txt_embed"), ids.iter().map(|&i| i as usize).collect());
    let pos = tape.gather_rows(v(vars, "txt_pos"), (0..ids.len()).collect());
    let x = tape.add(tok, pos);
    affine_tanh(tape, x, v(vars, "txt_proj_w"), v(vars, "txt_proj_b"))
}

/// Mean pool token states into a [1, d] summary row.
pub(crate) fn pool(tape: &mut Tape, states: Var) -> Var {
    let m = tape.mean_rows(states);
    tape.stack_rows(&[m])
}

/// Projection head: rows of x through the named head, L2-normalized.
pub(crate) fn project(tape: &mut Tape, vars: &ParamVars, head: &str, x: Var) -> Var {
    let w = v(vars, &format!("{head}_w"));
    let b = v(vars, &format!("{head}_b"));
    let y = tape.matmul(x, w);
    let y = tape.add_row_broadcast(y, b);
    tape.l2_norm_rows(y)
}

/// Fixed sharpness of the cross-attention scores, which are cosines.
const ATTN_INV_TEMP: f64 = 10.0;

/// One cross-attention block: text queries attend over image keys/values,
/// residual, then a tanh feed-forward with residual. Output T^m.
///
/// Queries and keys are the shared projection heads, so a token routes to
/// the image symbol its contrastively-aligned projection is closest to.
/// Dedicated q/k tables start as uniform or arbitrary routing and the
/// fusion losses alone never reorganize them; reusing the heads hands the
/// uni-modal alignment to the fusion stage as it is learned.
pub(crate) fn cross_block(tape: &mut Tape, vars: &ParamVars, txt: Var, img: Var) -> Var {
    let q = project(tape, vars, "head_w", txt);
    let k = project(tape, vars, "head_v", img);
    let val = tape.matmul(img, v(vars, "cross_v_w"));
    let cos = tape.matmul_trans_b(q, k);
    let sharp = tape.scale(cos, ATTN_INV_TEMP);
    let attn = tape.softmax_rows(sharp);
    let ctx = tape.matmul(attn, val);
    let o = tape.matmul(ctx, v(vars, "cross_o_w"));
    // Softmax keeps which symbol a token attends to but discards how well it
    // matched; matching and replacement detection hinge on exactly that
    // quality. Re-inject the attended cosine along a learned direction.
    let n_keys = tape.value(cos).cols();
    let qual = tape.mul_elem(attn, cos);
    let ones = tape.constant(Tensor::new(vec![n_keys, 1], vec![1.0; n_keys]));
    let e = tape.matmul(qual, ones);
    let s = tape.matmul(e, v(vars, "cross_s_w"));
    let x = tape.add(txt, o);
    let x = tape.add(x, s);
    let h = affine_tanh(tape, x, v(vars, "ff1_w"), v(vars, "ff1_b"));
    let h = tape.matmul(h, v(vars, "ff2_w"));
    let h = tape.add_row_broadcast(h, v(vars, "ff2_b"));
    tape.add(x, h)
}

/// Match/mismatch logits from multimodal rows: [n, d] -> [n, 2]. Matching is
/// an interaction between the text and attended-image parts of the residual
/// stream, so the head needs one hidden nonlinearity.
pub(crate) fn ritm_head(tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
    let h = affine_tanh(tape, x, v(vars, "ritm_w"), v(vars, "ritm_b"));
    let y = tape.matmul(h, v(vars, "ritm_o_w"));
    tape.add_row_broadcast(y, v(vars, "ritm_o_b"))
}

/// Vocabulary logits from multimodal rows: [n, d] -> [n, V].
pub(crate) fn mlm_head(tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
    let y = tape.matmul(x, v(vars, "mlm_w"));
    tape.add_row_broadcast(y, v(vars, "mlm_b"))
}

/// Per-position replacement score: [L, d] -> [L, 1], hidden layer as in the
/// matching head.
pub(crate) fn rlm_head(tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
    let h = affine_tanh(tape, x, v(vars, "rlm_w"), v(vars, "rlm_b"));
    let y = tape.matmul(h, v(vars, "rlm_o_w"));
    tape.add_row_broadcast(y, v(vars, "rlm_o_b"))
}

/// The full model: architecture, online parameters, and the momentum copy of
/// the uni-modal parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoders {
    pub config: ModelConfig,
    pub params: Params,
    pub momentum: Params,
}

/// Everything one forward pass produces for a (scene, caption) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    /// I^u, [n_visual, d].
    pub img_token_states: Tensor,
    /// T^u, [L, d].
    pub txt_token_states: Tensor,
    /// T^m from the cross block, [L, d].
    pub cross_states: Tensor,
    /// h_v of the pooled image state, unit norm, [proj].
    pub img_cls_proj: Tensor,
    /// h_w of the pooled text state, unit norm, [proj].
    pub txt_cls_proj: Tensor,
}

impl ToyEncoders {
    pub fn new(config: ModelConfig, seed: u64, log_temp: f64) -> Self {
        let params = Params::init(&config, seed, log_temp);
        let momentum = params.uni_modal_clone();
        ToyEncoders { config, params, momentum }
    }

    pub fn validate_inputs(&self, scene: &ToyScene, seq: &TokenSeq) -> Result<(), EncodeError> {
        if let Some(&sym) = scene.visual_tokens.iter().find(|&&s| s >= self.config.n_symbols) {
            return Err(EncodeError::VocabMismatch(format!(
                "visual symbol {sym} outside table of {}",
                self.config.n_symbols
            )));
        }
        if let Some(&id) = seq.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(EncodeError::VocabMismatch(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if seq.len() > self.config.max_len {
            return Err(EncodeError::VocabMismatch(format!(
                "sequence length {} exceeds position table of {}",
                seq.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass with the online parameters.
    pub fn encode_pair(&self, scene: &ToyScene, seq: &TokenSeq) -> Result<EncodedPair, EncodeError> {
        self.validate_inputs(scene, seq)?;
        let mut tape = Tape::new();
        let vars = self.params.constant_vars(&mut tape);
        let img = image_states(&mut tape, &vars, &scene.visual_tokens);
        let txt = text_states(&mut tape, &vars, &seq.ids);
        let cross = cross_block(&mut tape, &vars, txt, img);
        let img_pool = pool(&mut tape, img);
        let txt_pool = pool(&mut tape, txt);
        let img_proj = project(&mut tape, &vars, "head_v", img_pool);
        let txt_proj = project(&mut tape, &vars, "head_w", txt_pool);
        let as_vector = |t: &Tensor| Tensor::vector(t.row(0).to_vec());
        Ok(EncodedPair {
            img_token_states: tape.value(img).clone(),
            txt_token_states: tape.value(txt).clone(),
            cross_states: tape.value(cross).clone(),
            img_cls_proj: as_vector(tape.value(img_proj)),
            txt_cls_proj: as_vector(tape.value(txt_proj)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources;
    use crate::tokenizer::tokenize;
    use crate::toymodel::corpus::{generate_toy_corpus, N_SYMBOLS};

    fn toy_config(vocab_size: usize) -> ModelConfig {
        ModelConfig { d: 8, proj: 6, ff: 10, n_symbols: N_SYMBOLS, vocab_size, max_len: 16 }
    }

    fn fixture() -> (ToyEncoders, Vec<crate::toymodel::corpus::ToyScene>) {
        let vocab = resources::micro_vocab();
        let enc = ToyEncoders::new(toy_config(vocab.len()), 5, (0.07f64).ln());
        let corpus = generate_toy_corpus(1, 4, 4, 0.0);
        (enc, corpus.eval)
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (enc, scenes) = fixture();
        let vocab = resources::micro_vocab();
        let seq = tokenize(&scenes[0].caption, &vocab, 16).unwrap();
        let a = enc.encode_pair(&scenes[0], &seq).unwrap();
        let b = enc.encode_pair(&scenes[0], &seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_cls_is_permutation_invariant() {
        let (enc, scenes) = fixture();
        let vocab = resources::micro_vocab();
        let seq = tokenize(&scenes[0].caption, &vocab, 16).unwrap();
        let mut flipped = scenes[0].clone();
        flipped.visual_tokens.reverse();
        let a = enc.encode_pair(&scenes[0], &seq).unwrap();
        let b = enc.encode_pair(&flipped, &seq).unwrap();
        for (x, y) in a.img_cls_proj.data().iter().zip(b.img_cls_proj.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_projections_are_unit_norm() {
        let (enc, scenes) = fixture();
        let vocab = resources::micro_vocab();
        for scene in &scenes {
            let seq = tokenize(&scene.caption, &vocab, 16).unwrap();
            let e = enc.encode_pair(scene, &seq).unwrap();
            assert!((e.img_cls_proj.l2_norm() - 1.0).abs() < 1e-9);
            assert!((e.txt_cls_proj.l2_norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_parameters_give_equal_similarities() {
        let (mut enc, scenes) = fixture();
        let vocab = resources::micro_vocab();
        let names: Vec<String> = enc.params.names().map(str::to_string).collect();
        for n in &names {
            for x in enc.params.get_mut(n).data_mut() {
                *x = 0.0;
            }
        }
        let encoded: Vec<EncodedPair> = scenes
            .iter()
            .map(|s| enc.encode_pair(s, &tokenize(&s.caption, &vocab, 16).unwrap()).unwrap())
            .collect();
        let sim = |a: &Tensor, b: &Tensor| crate::tensor::dot(a.data(), b.data());
        let first = sim(&encoded[0].txt_cls_proj, &encoded[0].img_cls_proj);
        for t in &encoded {
            for i in &encoded {
                assert_eq!(sim(&t.txt_cls_proj, &i.img_cls_proj), first);
            }
        }
    }

    #[test]
    fn vocab_mismatch_is_detected() {
        let (enc, scenes) = fixture();
        let vocab = resources::micro_vocab();
        let mut seq = tokenize(&scenes[0].caption, &vocab, 16).unwrap();
        seq.ids[1] = enc.config.vocab_size as u32;
        assert!(matches!(
            enc.encode_pair(&scenes[0], &seq),
            Err(EncodeError::VocabMismatch(_))
        ));
        let mut bad_scene = scenes[0].clone();
        bad_scene.visual_tokens[0] = N_SYMBOLS;
        let ok_seq = tokenize(&scenes[0].caption, &vocab, 16).unwrap();
        assert!(matches!(
            enc.encode_pair(&bad_scene, &ok_seq),
            Err(EncodeError::VocabMismatch(_))
        ));
    }

    #[test]
    fn momentum_copy_mirrors_uni_modal_shapes() {
        let (enc, _) = fixture();
        let mom = enc.params.uni_modal_clone();
        assert_eq!(mom.as_map().len(), 11);
        for (name, t) in mom.iter() {
            assert_eq!(t.shape(), enc.params.get(name).shape());
        }
        assert!(mom.as_map().get("ritm_w").is_none());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = toy_config(50);
        let a = Params::init(&cfg, 9, -2.0);
        let b = Params::init(&cfg, 9, -2.0);
        assert_eq!(a, b);
        let c = Params::init(&cfg, 10, -2.0);
        assert_ne!(a, c);
        assert_eq!(a.get("log_temp").item(), -2.0);
        assert_eq!(a.get("mlm_w").shape(), &[cfg.d, 50]);
    }
}
