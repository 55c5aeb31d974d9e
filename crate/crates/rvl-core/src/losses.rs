//! The five training objectives, the momentum machinery around them, and the
//! finite-difference harness that certifies their gradients. Every public
//! loss builds a private tape, so the same backward pass serves both the
//! standalone functions here and the composite model loss in the trainer.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::rng;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::MaskedSeq;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} has L2 norm {norm}, inputs must be unit vectors")]
    NonNormalizedInput { row: usize, norm: f64 },
    #[error("shape mismatch between online and momentum parameters")]
    ShapeMismatch,
    #[error("batch of {0} is too small for hard-negative mining")]
    BatchTooSmall(usize),
    #[error("no valid token positions under the mask")]
    NoValidTokens,
    #[error("position {0} is not a valid target")]
    InvalidTarget(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("mlm label {label} is outside vocabulary of size {vocab}")]
    LabelOutOfRange { label: u32, vocab: usize },
}

/// Shared hyperparameters of the objective family. Defaults are sized for a
/// full-scale pipeline; the toy trainer overrides the queue capacity downward.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub queue_capacity: usize,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            margin: 0.2,
            queue_capacity: 65536,
            momentum: 0.995,
            batch_size: 32,
        }
    }
}

fn validate_rows_normalized(t: &Tensor, what: &str) -> Result<(), LossError> {
    let _ = what;
    for i in 0..t.rows() {
        let norm = crate::tensor::dot(t.row(i), t.row(i)).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(LossError::NonNormalizedInput { row: i, norm });
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit vectors from the momentum encoders. Pushed
/// rows are checked to be unit norm (1e-6 gate), then stored renormalized so
/// the contents hold unit norm to 1e-9 regardless of accumulated float dust.
#[derive(Debug, Clone)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MomentumQueue { capacity, dim, entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push_batch(&mut self, batch: &Tensor) -> Result<(), LossError> {
        if batch.cols() != self.dim {
            return Err(LossError::DimensionMismatch(format!(
                "queue dim {} but batch cols {}",
                self.dim,
                batch.cols()
            )));
        }
        validate_rows_normalized(batch, "queue batch")?;
        for i in 0..batch.rows() {
            let mut row = batch.row(i).to_vec();
            crate::tensor::l2_normalize(&mut row);
            self.entries.push_back(row);
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Queue contents as a [len, dim] tensor, oldest entry first.
    pub fn as_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for row in &self.entries {
            data.extend_from_slice(row);
        }
        Tensor::matrix(self.entries.len(), self.dim, data)
    }
}

fn take_or_zeros(grads: &mut Grads, tape: &Tape, v: Var) -> Tensor {
    grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
}

// ---------------------------------------------------------------------------
// Tape-node builders. The trainer splices these into its composite graph; the
// public wrappers below run them on fresh tapes.

/// InfoNCE in both directions. Candidates per anchor are the N in-batch
/// opposite-modality projections plus the opposite queue (constants); the
/// positive is the diagonal. Logits are similarities divided by exp(log_temp).
pub(crate) fn itc_node(
    tape: &mut Tape,
    text_proj: Var,
    img_proj: Var,
    txt_queue: Option<Var>,
    img_queue: Option<Var>,
    log_temp: Var,
) -> Var {
    let n = tape.value(text_proj).rows();
    let neg_lt = tape.neg(log_temp);
    let inv_temp = tape.exp(neg_lt);
    let text_cands = match txt_queue {
        Some(q) => tape.concat_rows(text_proj, q),
        None => text_proj,
    };
    let img_cands = match img_queue {
        Some(q) => tape.concat_rows(img_proj, q),
        None => img_proj,
    };
    let targets: Vec<usize> = (0..n).collect();

    let s_i2t = tape.matmul_trans_b(img_proj, text_cands);
    let logits_i2t = tape.mul_scalar_node(s_i2t, inv_temp);
    let l_i2t = tape.nll_rows_mean(logits_i2t, targets.clone());

    let s_t2i = tape.matmul_trans_b(text_proj, img_cands);
    let logits_t2i = tape.mul_scalar_node(s_t2i, inv_temp);
    let l_t2i = tape.nll_rows_mean(logits_t2i, targets);

    tape.add(l_i2t, l_t2i)
}

/// Margin on minimum image-token similarity: max(0, beta + min(g_hat) - min(g))
/// with g over the true caption and g_hat over the rewritten one. The
/// alternate sign convention (swapped minima) stays available behind
/// `paper_sign`.
pub(crate) fn ritc_node(
    tape: &mut Tape,
    img_cls: Var,
    token_projs: Var,
    valid: &[bool],
    rewritten_projs: Var,
    rewritten_valid: &[bool],
    beta: f64,
    paper_sign: bool,
) -> Var {
    let g = tape.matmul_trans_b(token_projs, img_cls);
    let g_hat = tape.matmul_trans_b(rewritten_projs, img_cls);
    let min_g = tape.masked_min(g, valid.to_vec());
    let min_g_hat = tape.masked_min(g_hat, rewritten_valid.to_vec());
    let diff = if paper_sign {
        tape.sub(min_g, min_g_hat)
    } else {
        tape.sub(min_g_hat, min_g)
    };
    let shifted = tape.add_const(diff, beta);
    tape.relu(shifted)
}

/// Mean cross-entropy over blocks of [., 2] match logits. Column 1 is the
/// "match" class. Empty blocks are skipped.
pub(crate) fn ritm_node(tape: &mut Tape, groups: &[(Var, bool)]) -> Var {
    let mut stacked: Option<Var> = None;
    let mut targets = Vec::new();
    for &(v, is_match) in groups {
        let rows = tape.value(v).rows();
        if tape.value(v).len() == 0 {
            continue;
        }
        targets.extend(std::iter::repeat(usize::from(is_match)).take(rows));
        stacked = Some(match stacked {
            None => v,
            Some(prev) => tape.concat_rows(prev, v),
        });
    }
    let all = stacked.expect("ritm over at least one nonempty block");
    tape.nll_rows_mean(all, targets)
}

/// Mean cross-entropy over labeled rows only. None when nothing is labeled.
pub(crate) fn mlm_node(tape: &mut Tape, logits: Var, labels: &[Option<u32>]) -> Option<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (p, label) in labels.iter().enumerate() {
        if let Some(id) = label {
            rows.push(p);
            targets.push(*id as usize);
        }
    }
    if rows.is_empty() {
        return None;
    }
    let picked = tape.gather_rows(logits, rows);
    Some(tape.nll_rows_mean(picked, targets))
}

/// Negative log masked softmax probability of the replaced position.
pub(crate) fn rlm_node(tape: &mut Tape, position_logits: Var, valid: &[bool], target: usize) -> Var {
    tape.masked_nll(position_logits, valid.to_vec(), target)
}

// ---------------------------------------------------------------------------
// Public loss functions.

#[derive(Debug, Clone)]
pub struct ItcGrads {
    pub d_text_proj: Tensor,
    pub d_img_proj: Tensor,
    pub d_log_temp: f64,
}

pub(crate) fn itc_loss_unchecked(
    text_proj: &Tensor,
    img_proj: &Tensor,
    img_queue: &Tensor,
    txt_queue: &Tensor,
    log_temp: f64,
) -> (f64, ItcGrads) {
    let mut tape = Tape::new();
    let t = tape.leaf(text_proj.clone());
    let i = tape.leaf(img_proj.clone());
    let lt = tape.leaf(Tensor::scalar(log_temp));
    let tq = (txt_queue.rows() > 0).then(|| tape.constant(txt_queue.clone()));
    let iq = (img_queue.rows() > 0).then(|| tape.constant(img_queue.clone()));
    let out = itc_node(&mut tape, t, i, tq, iq, lt);
    let value = tape.value(out).item();
    let mut grads = tape.backward(out);
    let g = ItcGrads {
        d_text_proj: take_or_zeros(&mut grads, &tape, t),
        d_img_proj: take_or_zeros(&mut grads, &tape, i),
        d_log_temp: take_or_zeros(&mut grads, &tape, lt).item(),
    };
    (value, g)
}

/// Queue-based InfoNCE over both retrieval directions. `temperature` is the
/// current tau; the returned temperature gradient is with respect to log tau,
/// which is the parameter the trainer actually optimizes.
pub fn itc_loss(
    text_proj: &Tensor,
    img_proj: &Tensor,
    img_queue: &MomentumQueue,
    txt_queue: &MomentumQueue,
    temperature: f64,
) -> Result<(f64, ItcGrads), LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::InvalidTemperature(temperature));
    }
    if text_proj.shape() != img_proj.shape() || text_proj.shape().len() != 2 {
        return Err(LossError::DimensionMismatch(format!(
            "text {:?} vs image {:?}",
            text_proj.shape(),
            img_proj.shape()
        )));
    }
    let d = text_proj.cols();
    if txt_queue.dim() != d || img_queue.dim() != d {
        return Err(LossError::DimensionMismatch(format!(
            "projection dim {d} vs queue dims {}/{}",
            txt_queue.dim(),
            img_queue.dim()
        )));
    }
    validate_rows_normalized(text_proj, "text_proj")?;
    validate_rows_normalized(img_proj, "img_proj")?;
    Ok(itc_loss_unchecked(
        text_proj,
        img_proj,
        &img_queue.as_tensor(),
        &txt_queue.as_tensor(),
        temperature.ln(),
    ))
}

#[derive(Debug, Clone)]
pub struct RitcGrads {
    pub d_img_cls: Tensor,
    pub d_token_projs: Tensor,
    pub d_rewritten_projs: Tensor,
}

pub(crate) fn ritc_loss_unchecked(
    img_cls_proj: &Tensor,
    token_projs: &Tensor,
    valid: &[bool],
    rewritten_projs: &Tensor,
    rewritten_valid: &[bool],
    beta: f64,
    paper_sign: bool,
) -> (f64, RitcGrads) {
    let img_row = Tensor::matrix(1, img_cls_proj.len(), img_cls_proj.data().to_vec());
    let mut tape = Tape::new();
    let img = tape.leaf(img_row);
    let tok = tape.leaf(token_projs.clone());
    let rew = tape.leaf(rewritten_projs.clone());
    let out = ritc_node(&mut tape, img, tok, valid, rew, rewritten_valid, beta, paper_sign);
    let value = tape.value(out).item();
    let mut grads = tape.backward(out);
    let mut d_img = take_or_zeros(&mut grads, &tape, img);
    let reshaped = Tensor::new(img_cls_proj.shape().to_vec(), d_img.data().to_vec());
    d_img = reshaped;
    let g = RitcGrads {
        d_img_cls: d_img,
        d_token_projs: take_or_zeros(&mut grads, &tape, tok),
        d_rewritten_projs: take_or_zeros(&mut grads, &tape, rew),
    };
    (value, g)
}

/// Hinge on the lower bound of image-token similarity, true caption vs
/// rewritten caption. The two captions may tokenize to different lengths, so
/// each side carries its own validity mask.
pub fn ritc_loss(
    img_cls_proj: &Tensor,
    token_projs: &Tensor,
    valid: &[bool],
    rewritten_projs: &Tensor,
    rewritten_valid: &[bool],
    beta: f64,
    paper_sign: bool,
) -> Result<(f64, RitcGrads), LossError> {
    let d = img_cls_proj.len();
    if token_projs.cols() != d || rewritten_projs.cols() != d {
        return Err(LossError::DimensionMismatch(format!(
            "image dim {d} vs token dims {}/{}",
            token_projs.cols(),
            rewritten_projs.cols()
        )));
    }
    if token_projs.rows() != valid.len() || rewritten_projs.rows() != rewritten_valid.len() {
        return Err(LossError::DimensionMismatch(
            "mask length must equal token row count".to_string(),
        ));
    }
    if !valid.contains(&true) || !rewritten_valid.contains(&true) {
        return Err(LossError::NoValidTokens);
    }
    Ok(ritc_loss_unchecked(
        img_cls_proj,
        token_projs,
        valid,
        rewritten_projs,
        rewritten_valid,
        beta,
        paper_sign,
    ))
}

#[derive(Debug, Clone)]
pub struct RitmGrads {
    pub d_pos_logits: Tensor,
    pub d_hardneg_logits: Tensor,
    pub d_rewritten_logits: Tensor,
}

pub(crate) fn ritm_loss_unchecked(
    pos_logits: &Tensor,
    hardneg_logits: &Tensor,
    rewritten_logits: &Tensor,
) -> (f64, RitmGrads) {
    let mut tape = Tape::new();
    let pos = tape.leaf(pos_logits.clone());
    let hard = tape.leaf(hardneg_logits.clone());
    let rew = tape.leaf(rewritten_logits.clone());
    let out = ritm_node(&mut tape, &[(pos, true), (hard, false), (rew, false)]);
    let value = tape.value(out).item();
    let mut grads = tape.backward(out);
    let g = RitmGrads {
        d_pos_logits: take_or_zeros(&mut grads, &tape, pos),
        d_hardneg_logits: take_or_zeros(&mut grads, &tape, hard),
        d_rewritten_logits: take_or_zeros(&mut grads, &tape, rew),
    };
    (value, g)
}

/// Two-fold matching cross-entropy: positives against column 1, hard
/// negatives and rewritten pairs against column 0, averaged over all rows.
pub fn ritm_loss(
    pos_logits: &Tensor,
    hardneg_logits: &Tensor,
    rewritten_logits: &Tensor,
) -> Result<(f64, RitmGrads), LossError> {
    for (name, t) in [
        ("pos", pos_logits),
        ("hardneg", hardneg_logits),
        ("rewritten", rewritten_logits),
    ] {
        if t.len() > 0 && t.cols() != 2 {
            return Err(LossError::DimensionMismatch(format!(
                "{name} logits must have 2 columns, got {}",
                t.cols()
            )));
        }
    }
    if pos_logits.len() == 0 && hardneg_logits.len() == 0 && rewritten_logits.len() == 0 {
        return Err(LossError::DimensionMismatch("no logit rows at all".to_string()));
    }
    Ok(ritm_loss_unchecked(pos_logits, hardneg_logits, rewritten_logits))
}

#[derive(Debug, Clone)]
pub struct MlmGrads {
    pub d_logits: Tensor,
    /// Number of labeled positions; 0 flags the defined-as-zero case.
    pub n_labeled: usize,
}

/// Mean cross-entropy over the labeled positions of a masked sequence.
/// With no labeled positions the loss is 0 with zero gradients, flagged by
/// `n_labeled == 0`.
pub fn mlm_loss(logits: &Tensor, masked: &MaskedSeq) -> Result<(f64, MlmGrads), LossError> {
    if logits.rows() != masked.mlm_labels.len() {
        return Err(LossError::DimensionMismatch(format!(
            "{} logit rows vs {} label slots",
            logits.rows(),
            masked.mlm_labels.len()
        )));
    }
    let vocab = logits.cols();
    for label in masked.mlm_labels.iter().flatten() {
        if *label as usize >= vocab {
            return Err(LossError::LabelOutOfRange { label: *label, vocab });
        }
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    match mlm_node(&mut tape, l, &masked.mlm_labels) {
        None => Ok((0.0, MlmGrads { d_logits: Tensor::zeros(logits.shape().to_vec()), n_labeled: 0 })),
        Some(out) => {
            let value = tape.value(out).item();
            let mut grads = tape.backward(out);
            let n_labeled = masked.mlm_labels.iter().flatten().count();
            Ok((value, MlmGrads { d_logits: take_or_zeros(&mut grads, &tape, l), n_labeled }))
        }
    }
}

/// Negative log probability of the replaced position under a softmax
/// restricted to valid positions.
pub fn rlm_loss(
    position_logits: &Tensor,
    target: &crate::tokenizer::RlmTarget,
    valid: &[bool],
) -> Result<(f64, Tensor), LossError> {
    let l = position_logits.len();
    if valid.len() != l || target.length != l {
        return Err(LossError::DimensionMismatch(format!(
            "{l} logits vs {} mask slots vs declared length {}",
            valid.len(),
            target.length
        )));
    }
    if !valid.contains(&true) {
        return Err(LossError::NoValidTokens);
    }
    if target.position >= l || !valid[target.position] {
        return Err(LossError::InvalidTarget(target.position));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(position_logits.clone());
    let out = rlm_node(&mut tape, x, valid, target.position);
    let value = tape.value(out).item();
    let mut grads = tape.backward(out);
    Ok((value, take_or_zeros(&mut grads, &tape, x)))
}

/// One objective's value plus its gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Term {
    pub value: f64,
    pub gradients: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct LossBundle {
    pub itc: f64,
    pub ritc: f64,
    pub ritm: f64,
    pub mlm: f64,
    pub rlm: f64,
    pub total: f64,
    pub gradients: BTreeMap<String, Tensor>,
}

/// Unweighted sum of the five terms; gradient maps merge additively.
pub fn total_loss(itc: Term, ritc: Term, ritm: Term, mlm: Term, rlm: Term) -> LossBundle {
    let total = itc.value + ritc.value + ritm.value + mlm.value + rlm.value;
    let mut gradients: BTreeMap<String, Tensor> = BTreeMap::new();
    for term in [&itc, &ritc, &ritm, &mlm, &rlm] {
        for (name, grad) in &term.gradients {
            match gradients.get_mut(name) {
                Some(acc) => {
                    assert_eq!(acc.shape(), grad.shape(), "gradient shapes for {name}");
                    acc.add_scaled(grad, 1.0);
                }
                None => {
                    gradients.insert(name.clone(), grad.clone());
                }
            }
        }
    }
    LossBundle {
        itc: itc.value,
        ritc: ritc.value,
        ritm: ritm.value,
        mlm: mlm.value,
        rlm: rlm.value,
        total,
        gradients,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegatives {
    /// For each image row i, the index of its sampled negative text.
    pub text_for_image: Vec<usize>,
    /// For each text column j, the index of its sampled negative image.
    pub image_for_text: Vec<usize>,
}

fn sample_off_diagonal(scores: &[f64], excluded: usize, rng: &mut impl rand::Rng) -> usize {
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != excluded)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, v)| if j == excluded { 0.0 } else { (v - max).exp() })
        .collect();
    let z: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * z;
    let mut chosen = excluded;
    for (j, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        chosen = j;
        u -= w;
        if u <= 0.0 {
            break;
        }
    }
    chosen
}

/// Samples one hard negative per row (negative text for each image) and per
/// column (negative image for each text) of the in-batch similarity matrix,
/// proportional to the softmax of similarities with the diagonal excluded.
/// Row draws happen before column draws, each in index order.
pub fn sample_hard_negatives(sim: &Tensor, seed: u64) -> Result<HardNegatives, LossError> {
    let n = sim.rows();
    if sim.shape().len() != 2 || sim.cols() != n {
        return Err(LossError::DimensionMismatch(format!(
            "similarity matrix must be square, got {:?}",
            sim.shape()
        )));
    }
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let mut rng = rng::stream(seed);
    let mut text_for_image = Vec::with_capacity(n);
    for i in 0..n {
        text_for_image.push(sample_off_diagonal(sim.row(i), i, &mut rng));
    }
    let mut image_for_text = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sim.at(i, j)).collect();
        image_for_text.push(sample_off_diagonal(&col, j, &mut rng));
    }
    Ok(HardNegatives { text_for_image, image_for_text })
}

/// momentum <- m * momentum + (1 - m) * online, elementwise.
pub fn momentum_step(online: &Tensor, momentum: &mut Tensor, m: f64) -> Result<(), LossError> {
    if online.shape() != momentum.shape() {
        return Err(LossError::ShapeMismatch);
    }
    for (mv, ov) in momentum.data_mut().iter_mut().zip(online.data()) {
        *mv = m * *mv + (1.0 - m) * ov;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient verification.

/// Central-difference check. `f` returns the loss value and one gradient
/// tensor per input, shapes matching. Returns the worst relative error over
/// all coordinates, with denominator max(|analytic|, |numeric|, 1e-5). The
/// floor makes the comparison absolute for structurally-zero gradients
/// (e.g. a bias under a shift-invariant softmax), whose central differences
/// carry cancellation noise of order |f|*eps/h no matter how exact the
/// backward pass is. The five-point stencil keeps truncation error at h^4,
/// below the tolerance even where sharpened softmax chains give the loss
/// large third derivatives.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> f64
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        assert_eq!(analytic[ti].shape(), inputs[ti].shape(), "gradient shape for input {ti}");
        for k in 0..inputs[ti].len() {
            let at = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[ti].data_mut()[k] += delta;
                f(&moved).0
            };
            let numeric =
                (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let ana = analytic[ti].data()[k];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub dims: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rand_gaussian(shape: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::normal(rng)).collect())
}

fn rand_unit_rows(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
    let mut t = rand_gaussian(vec![rows, cols], rng);
    for i in 0..rows {
        crate::tensor::l2_normalize(t.row_mut(i));
    }
    t
}

fn rand_mask(len: usize, min_true: usize, rng: &mut impl rand::Rng) -> Vec<bool> {
    loop {
        let mask: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < 0.7).collect();
        if mask.iter().filter(|&&b| b).count() >= min_true {
            return mask;
        }
    }
}

fn masked_values<'a>(xs: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    xs.iter().zip(mask).filter(|(_, &ok)| ok).map(|(v, _)| *v)
}

/// Smallest gap between the minimum and any other masked value; degenerate
/// (tied) minima make the subgradient ambiguous.
fn min_gap(xs: &[f64], mask: &[bool]) -> f64 {
    let min = masked_values(xs, mask).fold(f64::INFINITY, f64::min);
    masked_values(xs, mask)
        .filter(|v| *v > min)
        .map(|v| v - min)
        .fold(f64::INFINITY, f64::min)
}

fn itc_point(rng: &mut impl rand::Rng, h: f64) -> f64 {
    let (n, d, m) = (4, 8, 16);
    let text = rand_unit_rows(n, d, rng);
    let img = rand_unit_rows(n, d, rng);
    let txt_queue = rand_unit_rows(m, d, rng);
    let img_queue = rand_unit_rows(m, d, rng);
    let log_temp = Tensor::scalar(-2.0 + rng.random::<f64>());
    finite_diff_check(
        |xs| {
            let (v, g) = itc_loss_unchecked(&xs[0], &xs[1], &img_queue, &txt_queue, xs[2].item());
            (v, vec![g.d_text_proj, g.d_img_proj, Tensor::scalar(g.d_log_temp)])
        },
        &[text, img, log_temp],
        h,
    )
}

fn ritc_point(rng: &mut impl rand::Rng, h: f64) -> f64 {
    let (l_tok, l_rew, d) = (6, 5, 8);
    let beta = 0.2;
    loop {
        let img = rand_unit_rows(1, d, rng);
        let tok = rand_unit_rows(l_tok, d, rng);
        let rew = rand_unit_rows(l_rew, d, rng);
        let valid = rand_mask(l_tok, 2, rng);
        let rew_valid = rand_mask(l_rew, 2, rng);
        let g: Vec<f64> = (0..l_tok).map(|i| crate::tensor::dot(tok.row(i), img.row(0))).collect();
        let gh: Vec<f64> = (0..l_rew).map(|i| crate::tensor::dot(rew.row(i), img.row(0))).collect();
        let min_g = masked_values(&g, &valid).fold(f64::INFINITY, f64::min);
        let min_gh = masked_values(&gh, &rew_valid).fold(f64::INFINITY, f64::min);
        let hinge_arg = beta + min_gh - min_g;
        // stay away from the hinge kink and from tied minima
        if hinge_arg.abs() < 1e-3 || min_gap(&g, &valid) < 1e-3 || min_gap(&gh, &rew_valid) < 1e-3
        {
            continue;
        }
        return finite_diff_check(
            |xs| {
                let (v, g) =
                    ritc_loss_unchecked(&xs[0], &xs[1], &valid, &xs[2], &rew_valid, beta, false);
                (v, vec![g.d_img_cls, g.d_token_projs, g.d_rewritten_projs])
            },
            &[img, tok, rew],
            h,
        );
    }
}

fn ritm_point(rng: &mut impl rand::Rng, h: f64) -> f64 {
    let pos = rand_gaussian(vec![3, 2], rng);
    let hard = rand_gaussian(vec![6, 2], rng);
    let rew = rand_gaussian(vec![3, 2], rng);
    finite_diff_check(
        |xs| {
            let (v, g) = ritm_loss_unchecked(&xs[0], &xs[1], &xs[2]);
            (v, vec![g.d_pos_logits, g.d_hardneg_logits, g.d_rewritten_logits])
        },
        &[pos, hard, rew],
        h,
    )
}

fn mlm_point(rng: &mut impl rand::Rng, h: f64) -> f64 {
    let (l, v) = (8, 12);
    let logits = rand_gaussian(vec![l, v], rng);
    let labels: Vec<Option<u32>> = loop {
        let candidate: Vec<Option<u32>> = (0..l)
            .map(|_| (rng.random::<f64>() < 0.4).then(|| rng.random_range(0..v as u32)))
            .collect();
        if candidate.iter().any(Option::is_some) {
            break candidate;
        }
    };
    let masked = MaskedSeq { ids: vec![0; l], mlm_labels: labels, forced_position: None };
    finite_diff_check(
        |xs| {
            let (v, g) = mlm_loss(&xs[0], &masked).expect("dims fixed");
            (v, vec![g.d_logits])
        },
        &[logits],
        h,
    )
}

fn rlm_point(rng: &mut impl rand::Rng, h: f64) -> f64 {
    let l = 12;
    let logits = rand_gaussian(vec![l], rng);
    let valid = rand_mask(l, 3, rng);
    let valid_positions: Vec<usize> =
        valid.iter().enumerate().filter(|(_, &ok)| ok).map(|(p, _)| p).collect();
    let target_pos = valid_positions[rng.random_range(0..valid_positions.len())];
    let target = crate::tokenizer::RlmTarget { position: target_pos, length: l };
    finite_diff_check(
        |xs| {
            let (v, g) = rlm_loss(&xs[0], &target, &valid).expect("target fixed");
            (v, vec![g])
        },
        &[logits],
        h,
    )
}

/// Runs `points` finite-difference points per objective and reports the
/// worst relative error of each. Degenerate draws (hinge kinks, tied minima)
/// are resampled.
pub fn grad_check_suite(seed: u64, points: usize, h: f64) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let cases: [(&'static str, String, fn(&mut rand_chacha::ChaCha12Rng, f64) -> f64); 5] = [
        ("itc", "N=4 D=8 M=16".to_string(), itc_point),
        ("ritc", "L=6/5 D=8".to_string(), ritc_point),
        ("ritm", "rows=3+6+3".to_string(), ritm_point),
        ("mlm", "L=8 V=12".to_string(), mlm_point),
        ("rlm", "L=12".to_string(), rlm_point),
    ];
    for (ordinal, (name, dims, point)) in cases.into_iter().enumerate() {
        let mut rng = rng::derived_stream(seed, ordinal as u64);
        let mut max_rel_err = 0.0f64;
        for _ in 0..points {
            max_rel_err = max_rel_err.max(point(&mut rng, h));
        }
        reports.push(GradCheckReport { name, dims, points, max_rel_err });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::RlmTarget;

    fn unit_queue(rows: usize, dim: usize, fill: &[f64]) -> MomentumQueue {
        let mut q = MomentumQueue::new(rows.max(1), dim);
        if rows > 0 {
            let t = Tensor::matrix(rows, dim, fill.to_vec());
            q.push_batch(&t).unwrap();
        }
        q
    }

    #[test]
    fn itc_single_pair_is_zero() {
        let text = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]);
        let img = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]);
        let empty_i = MomentumQueue::new(4, 3);
        let empty_t = MomentumQueue::new(4, 3);
        let (v, _) = itc_loss(&text, &img, &empty_i, &empty_t, 0.07).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn itc_uniform_similarity_hits_log_count() {
        // all text candidates equal u, all image candidates equal w: each
        // softmax row is uniform over N + M entries
        let (n, m, d) = (3, 5, 4);
        let u = [0.5, 0.5, 0.5, 0.5];
        let w = [1.0, 0.0, 0.0, 0.0];
        let text = Tensor::matrix(n, d, u.repeat(n));
        let img = Tensor::matrix(n, d, w.repeat(n));
        let txt_queue = unit_queue(m, d, &u.repeat(m));
        let img_queue = unit_queue(m, d, &w.repeat(m));
        let (v, _) = itc_loss(&text, &img, &img_queue, &txt_queue, 0.07).unwrap();
        let expect = 2.0 * ((n + m) as f64).ln();
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
    }

    #[test]
    fn itc_rejects_unnormalized_rows() {
        let text = Tensor::matrix(1, 3, vec![1.0, 1.0, 0.0]);
        let img = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]);
        let q1 = MomentumQueue::new(4, 3);
        let q2 = MomentumQueue::new(4, 3);
        assert!(matches!(
            itc_loss(&text, &img, &q1, &q2, 0.07),
            Err(LossError::NonNormalizedInput { row: 0, .. })
        ));
    }

    #[test]
    fn itc_symmetry_under_role_swap() {
        let mut rng = rng::stream(42);
        let text = rand_unit_rows(4, 6, &mut rng);
        let img = rand_unit_rows(4, 6, &mut rng);
        let tq = rand_unit_rows(7, 6, &mut rng);
        let iq = rand_unit_rows(7, 6, &mut rng);
        let (a, _) = itc_loss_unchecked(&text, &img, &iq, &tq, -2.0);
        let (b, _) = itc_loss_unchecked(&img, &text, &tq, &iq, -2.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ritc_zero_when_margin_satisfied_and_beta_at_equality() {
        let img = Tensor::vector(vec![1.0, 0.0]);
        // g = [0.8, 0.9], g_hat = [0.5, 0.6]: beta + 0.5 - 0.8 < 0
        let tok = Tensor::matrix(2, 2, vec![0.8, 0.0, 0.9, 0.0]);
        let rew = Tensor::matrix(2, 2, vec![0.5, 0.0, 0.6, 0.0]);
        let (v, g) =
            ritc_loss(&img, &tok, &[true, true], &rew, &[true, true], 0.1, false).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.d_token_projs.data().iter().all(|&x| x == 0.0));

        // identical projections leave exactly the margin
        let (v, _) = ritc_loss(&img, &tok, &[true, true], &tok, &[true, true], 0.1, false).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ritc_arithmetic_and_paper_sign() {
        let img = Tensor::vector(vec![1.0, 0.0]);
        let tok = Tensor::matrix(1, 2, vec![0.5, 0.0]);
        let rew = Tensor::matrix(1, 2, vec![0.75, 0.0]);
        let (v, _) = ritc_loss(&img, &tok, &[true], &rew, &[true], 0.1, false).unwrap();
        assert!((v - 0.35).abs() < 1e-12);
        // printed sign flips the roles: max(0, 0.1 + 0.5 - 0.75) = 0
        let (v, _) = ritc_loss(&img, &tok, &[true], &rew, &[true], 0.1, true).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ritc_needs_valid_positions() {
        let img = Tensor::vector(vec![1.0, 0.0]);
        let tok = Tensor::matrix(1, 2, vec![0.5, 0.0]);
        assert_eq!(
            ritc_loss(&img, &tok, &[false], &tok, &[true], 0.1, false).unwrap_err(),
            LossError::NoValidTokens
        );
    }

    #[test]
    fn ritm_uniform_logits_is_ln2() {
        let pos = Tensor::zeros(vec![2, 2]);
        let hard = Tensor::zeros(vec![4, 2]);
        let rew = Tensor::zeros(vec![2, 2]);
        let (v, _) = ritm_loss(&pos, &hard, &rew).unwrap();
        assert!((v - (2.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn ritm_saturated_correct_logits_vanish() {
        let pos = Tensor::matrix(1, 2, vec![-30.0, 30.0]);
        let hard = Tensor::matrix(1, 2, vec![30.0, -30.0]);
        let rew = Tensor::matrix(1, 2, vec![30.0, -30.0]);
        let (v, _) = ritm_loss(&pos, &hard, &rew).unwrap();
        assert!(v < 1e-9);
    }

    #[test]
    fn mlm_uniform_single_label_is_ln_vocab() {
        let logits = Tensor::zeros(vec![4, 10]);
        let masked = MaskedSeq {
            ids: vec![0; 4],
            mlm_labels: vec![None, Some(3), None, None],
            forced_position: None,
        };
        let (v, g) = mlm_loss(&logits, &masked).unwrap();
        assert!((v - (10.0f64).ln()).abs() < 1e-9);
        assert_eq!(g.n_labeled, 1);
        // unlabeled rows get no gradient
        assert!(g.d_logits.row(0).iter().all(|&x| x == 0.0));
        assert!(g.d_logits.row(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn mlm_no_labels_is_flagged_zero() {
        let logits = Tensor::zeros(vec![3, 5]);
        let masked =
            MaskedSeq { ids: vec![0; 3], mlm_labels: vec![None; 3], forced_position: None };
        let (v, g) = mlm_loss(&logits, &masked).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.n_labeled, 0);
        assert!(g.d_logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rlm_uniform_is_ln_valid_count() {
        let logits = Tensor::vector(vec![0.0; 7]);
        let valid = vec![false, true, true, true, true, true, false];
        let target = RlmTarget { position: 2, length: 7 };
        let (v, _) = rlm_loss(&logits, &target, &valid).unwrap();
        assert!((v - (5.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn rlm_saturated_target_and_invalid_target() {
        let mut data = vec![0.0; 6];
        data[4] = 30.0;
        let logits = Tensor::vector(data);
        let valid = vec![false, true, true, true, true, false];
        let (v, _) = rlm_loss(&logits, &RlmTarget { position: 4, length: 6 }, &valid).unwrap();
        assert!(v < 1e-9);
        assert_eq!(
            rlm_loss(&logits, &RlmTarget { position: 0, length: 6 }, &valid),
            Err(LossError::InvalidTarget(0))
        );
    }

    #[test]
    fn total_loss_sums_and_merges() {
        let mut a = BTreeMap::new();
        a.insert("w".to_string(), Tensor::vector(vec![1.0, 2.0]));
        let mut b = BTreeMap::new();
        b.insert("w".to_string(), Tensor::vector(vec![10.0, 20.0]));
        b.insert("b".to_string(), Tensor::scalar(3.0));
        let bundle = total_loss(
            Term { value: 1.0, gradients: a },
            Term { value: 2.0, gradients: b },
            Term { value: 3.0, gradients: BTreeMap::new() },
            Term { value: 4.0, gradients: BTreeMap::new() },
            Term { value: 5.0, gradients: BTreeMap::new() },
        );
        assert_eq!(bundle.total, 15.0);
        assert_eq!(bundle.gradients["w"].data(), &[11.0, 22.0]);
        assert_eq!(bundle.gradients["b"].item(), 3.0);
    }

    #[test]
    fn queue_fifo_and_renormalization() {
        let mut q = MomentumQueue::new(4, 2);
        let batch1 = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        q.push_batch(&batch1).unwrap();
        assert_eq!(q.len(), 3);
        let batch2 = Tensor::matrix(3, 2, vec![0.0, -1.0, -1.0, 0.0, 0.6, 0.8]);
        q.push_batch(&batch2).unwrap();
        assert_eq!(q.len(), 4);
        let t = q.as_tensor();
        // oldest two of batch1 evicted
        assert_eq!(t.row(0), &[1.0, 0.0]);
        assert_eq!(t.row(1), &[0.0, -1.0]);
        assert_eq!(t.row(3), &[0.6, 0.8]);
        for i in 0..t.rows() {
            let norm = crate::tensor::dot(t.row(i), t.row(i)).sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // gate rejects clearly non-unit rows
        let bad = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        assert!(matches!(q.push_batch(&bad), Err(LossError::NonNormalizedInput { .. })));
    }

    #[test]
    fn momentum_step_identities() {
        let online = Tensor::vector(vec![2.0, 4.0]);
        let mut mom = Tensor::vector(vec![0.0, 0.0]);
        momentum_step(&online, &mut mom, 1.0).unwrap();
        assert_eq!(mom.data(), &[0.0, 0.0]);
        momentum_step(&online, &mut mom, 0.0).unwrap();
        assert_eq!(mom.data(), &[2.0, 4.0]);
        let mismatched = Tensor::vector(vec![1.0]);
        assert_eq!(momentum_step(&mismatched, &mut mom, 0.5), Err(LossError::ShapeMismatch));
    }

    #[test]
    fn hard_negatives_forced_and_dominant() {
        let sim = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8]);
        let h = sample_hard_negatives(&sim, 0).unwrap();
        assert_eq!(h.text_for_image, vec![1, 0]);
        assert_eq!(h.image_for_text, vec![1, 0]);
        assert_eq!(
            sample_hard_negatives(&Tensor::matrix(1, 1, vec![1.0]), 0),
            Err(LossError::BatchTooSmall(1))
        );

        // a dominant off-diagonal similarity wins almost always
        let mut counts = [0usize; 3];
        let sim = Tensor::matrix(
            3,
            3,
            vec![1.0, 8.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        for seed in 0..10_000 {
            let h = sample_hard_negatives(&sim, seed).unwrap();
            counts[h.text_for_image[0]] += 1;
        }
        assert_eq!(counts[0], 0, "diagonal must never be drawn");
        assert!(counts[1] as f64 / 10_000.0 > 0.95, "dominant index drawn {counts:?}");
    }

    #[test]
    fn hard_negatives_deterministic_under_seed() {
        let mut rng = rng::stream(9);
        let sim = rand_gaussian(vec![6, 6], &mut rng);
        assert_eq!(
            sample_hard_negatives(&sim, 77).unwrap(),
            sample_hard_negatives(&sim, 77).unwrap()
        );
    }

    #[test]
    fn finite_diff_on_quadratic_is_tiny() {
        let f = |xs: &[Tensor]| {
            let v = xs[0].data().iter().map(|x| x * x).sum::<f64>();
            let g = Tensor::new(
                xs[0].shape().to_vec(),
                xs[0].data().iter().map(|x| 2.0 * x).collect(),
            );
            (v, vec![g])
        };
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        assert!(finite_diff_check(f, &[x], 1e-5) < 1e-9);
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let f = |xs: &[Tensor]| (7.0, vec![Tensor::zeros(xs[0].shape().to_vec())]);
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(finite_diff_check(f, &[x], 1e-5), 0.0);
    }

    #[test]
    fn grad_check_smoke() {
        for report in grad_check_suite(1234, 5, 1e-5) {
            assert!(
                report.passed(1e-4),
                "{} failed with max rel err {}",
                report.name,
                report.max_rel_err
            );
        }
    }
}
