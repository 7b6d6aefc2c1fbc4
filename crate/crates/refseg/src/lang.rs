//! Linguistic stream: token embedding, a unidirectional LSTM producing the
//! per-word feature matrix L, a word-type classifier producing P, and the
//! three derived vectors that drive the multimodal stages:
//!
//! - q: entity context, the (entity + attribute)-weighted sum of word
//!   features,
//! - R: relational features, each word feature scaled by its relation
//!   probability,
//! - s: necessary-word vector, the (entity + attribute + relation)-weighted
//!   sum.
//!
//! Padding positions contribute exactly zero to all three.

use crate::config::RunConfig;
use crate::error::Result;
use crate::init::uniform_param;
use crate::vocab::PAD;
use tapegrad::{ParamId, ParamStore, SplitMix64, Tape, Tensor, TensorRef};

#[derive(Clone, Debug)]
pub struct LangParams {
    pub embed: ParamId,
    /// Input projection [C_l, 4*C_l], gate order (input, forget, cell, output).
    pub lstm_wx: ParamId,
    /// Recurrent projection [C_l, 4*C_l].
    pub lstm_wh: ParamId,
    pub lstm_b: ParamId,
    pub cls_w1: ParamId,
    pub cls_b1: ParamId,
    pub cls_w2: ParamId,
    pub cls_b2: ParamId,
}

impl LangParams {
    pub fn init(store: &mut ParamStore, cfg: &RunConfig, vocab_size: usize, rng: &mut SplitMix64) -> Self {
        let c = cfg.c_l;
        LangParams {
            embed: uniform_param(store, rng, "lang.embed", &[vocab_size, c], c),
            lstm_wx: uniform_param(store, rng, "lang.lstm_wx", &[c, 4 * c], c),
            lstm_wh: uniform_param(store, rng, "lang.lstm_wh", &[c, 4 * c], c),
            lstm_b: uniform_param(store, rng, "lang.lstm_b", &[4 * c], c),
            cls_w1: uniform_param(store, rng, "lang.cls_w1", &[c, cfg.c_n], c),
            cls_b1: uniform_param(store, rng, "lang.cls_b1", &[cfg.c_n], c),
            cls_w2: uniform_param(store, rng, "lang.cls_w2", &[cfg.c_n, 4], cfg.c_n),
            cls_b2: uniform_param(store, rng, "lang.cls_b2", &[4], cfg.c_n),
        }
    }
}

/// Everything downstream stages need from the expression.
pub struct LangOut {
    /// L, [T, C_l]: hidden state at each step.
    pub features: TensorRef,
    /// Pre-softmax word-type scores, [T, 4] (for the auxiliary loss).
    pub type_logits: TensorRef,
    /// P, [T, 4]: rows are [entity, attribute, relation, unnecessary].
    pub probs: TensorRef,
    /// q, [1, C_l].
    pub entity_context: TensorRef,
    /// R, [T, C_l].
    pub relational: TensorRef,
    /// s, [1, C_l].
    pub necessary: TensorRef,
}

/// Embedding lookup followed by a single-layer unidirectional LSTM from a
/// zero initial state; row t of the result is the hidden state after
/// consuming token t.
pub fn encode(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &LangParams,
    tokens: &[usize],
    c_l: usize,
) -> Result<TensorRef> {
    assert!(!tokens.is_empty(), "encode: empty token sequence");
    let table = staged[params.embed.index()];
    let wx = staged[params.lstm_wx.index()];
    let wh = staged[params.lstm_wh.index()];
    let b = staged[params.lstm_b.index()];

    let mut h = tape.constant(Tensor::zeros(&[1, c_l]));
    let mut cell = tape.constant(Tensor::zeros(&[1, c_l]));
    let mut rows = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let x = tape.embed(table, &[tok])?;
        let gx = tape.matmul(x, wx)?;
        let gh = tape.matmul(h, wh)?;
        let pre = tape.add(gx, gh)?;
        let gates = tape.add(pre, b)?;
        let i_gate = tape.slice_channels(gates, 0, c_l)?;
        let f_gate = tape.slice_channels(gates, c_l, 2 * c_l)?;
        let g_cand = tape.slice_channels(gates, 2 * c_l, 3 * c_l)?;
        let o_gate = tape.slice_channels(gates, 3 * c_l, 4 * c_l)?;
        let i_gate = tape.sigmoid(i_gate)?;
        let f_gate = tape.sigmoid(f_gate)?;
        let o_gate = tape.sigmoid(o_gate)?;
        let g_cand = tape.tanh(g_cand)?;
        let keep = tape.mul(f_gate, cell)?;
        let write = tape.mul(i_gate, g_cand)?;
        cell = tape.add(keep, write)?;
        let bounded = tape.tanh(cell)?;
        h = tape.mul(o_gate, bounded)?;
        rows.push(h);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// Word-type scores per word: softmax(W2 * sigmoid(W1 * l + b1) + b2),
/// applied row-wise. Returns (pre-softmax logits, probabilities).
pub fn classify_word_types(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &LangParams,
    features: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let z1 = tape.matmul(features, staged[params.cls_w1.index()])?;
    let z1 = tape.add(z1, staged[params.cls_b1.index()])?;
    let a1 = tape.sigmoid(z1)?;
    let logits = tape.matmul(a1, staged[params.cls_w2.index()])?;
    let logits = tape.add(logits, staged[params.cls_b2.index()])?;
    let probs = tape.softmax(logits, 1)?;
    Ok((logits, probs))
}

/// [T, 1] mask that zeroes padding positions.
pub fn pad_mask(tape: &mut Tape, tokens: &[usize]) -> TensorRef {
    let data = tokens.iter().map(|&t| f64::from(t != PAD)).collect();
    tape.constant(Tensor::new(vec![tokens.len(), 1], data))
}

fn weighted_word_sum(
    tape: &mut Tape,
    features: TensorRef,
    weights: TensorRef,
    mask: TensorRef,
) -> Result<TensorRef> {
    let masked = tape.mul(weights, mask)?;
    let row = tape.transpose(masked)?;
    Ok(tape.matmul(row, features)?)
}

/// q = sum_t (p_ent + p_attr) * l_t, excluding padding.
pub fn entity_context(
    tape: &mut Tape,
    features: TensorRef,
    probs: TensorRef,
    mask: TensorRef,
) -> Result<TensorRef> {
    let p_ent = tape.slice_channels(probs, 0, 1)?;
    let p_attr = tape.slice_channels(probs, 1, 2)?;
    let w = tape.add(p_ent, p_attr)?;
    weighted_word_sum(tape, features, w, mask)
}

/// R: row t is p_rel(t) * l_t; padding rows are zero.
pub fn relational_features(
    tape: &mut Tape,
    features: TensorRef,
    probs: TensorRef,
    mask: TensorRef,
) -> Result<TensorRef> {
    let p_rel = tape.slice_channels(probs, 2, 3)?;
    let masked = tape.mul(p_rel, mask)?;
    Ok(tape.mul(features, masked)?)
}

/// s = sum_t (p_ent + p_attr + p_rel) * l_t, excluding padding.
pub fn necessary_words(
    tape: &mut Tape,
    features: TensorRef,
    probs: TensorRef,
    mask: TensorRef,
) -> Result<TensorRef> {
    let p_ent = tape.slice_channels(probs, 0, 1)?;
    let p_attr = tape.slice_channels(probs, 1, 2)?;
    let p_rel = tape.slice_channels(probs, 2, 3)?;
    let ea = tape.add(p_ent, p_attr)?;
    let w = tape.add(ea, p_rel)?;
    weighted_word_sum(tape, features, w, mask)
}

/// Full linguistic pass over a token sequence.
pub fn forward(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &LangParams,
    tokens: &[usize],
    cfg: &RunConfig,
) -> Result<LangOut> {
    let features = encode(tape, staged, params, tokens, cfg.c_l)?;
    let (type_logits, probs) = classify_word_types(tape, staged, params, features)?;
    let mask = pad_mask(tape, tokens);
    Ok(LangOut {
        features,
        type_logits,
        probs,
        entity_context: entity_context(tape, features, probs, mask)?,
        relational: relational_features(tape, features, probs, mask)?,
        necessary: necessary_words(tape, features, probs, mask)?,
    })
}
