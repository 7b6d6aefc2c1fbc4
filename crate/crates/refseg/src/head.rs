//! Prediction head: ConvLSTM fusion of the exchanged levels (or a plain
//! 1x1 projection in single-level mode), pixel-wise binary cross-entropy
//! in the stable logit form, and mask binarization.

use crate::config::RunConfig;
use crate::error::Result;
use crate::init::uniform_param;
use tapegrad::{kernels, ParamId, ParamStore, SplitMix64, Tape, Tensor, TensorRef};

#[derive(Clone, Debug)]
pub enum HeadParams {
    /// 1x1 projection of a single level to logits.
    SingleLevel { out_w: ParamId, out_b: ParamId },
    /// ConvLSTM over the level sequence, then a 1x1 projection of the last
    /// hidden state.
    ConvLstm {
        /// [3, 3, C_m + C_cell, 4 * C_cell], gate order (input, forget,
        /// candidate, output).
        kernel: ParamId,
        bias: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, cfg: &RunConfig, rng: &mut SplitMix64) -> Self {
        if cfg.tgfe_enabled {
            let fan_in = 3 * 3 * (cfg.c_m + cfg.c_cell);
            HeadParams::ConvLstm {
                kernel: uniform_param(store, rng, "head.lstm.kernel", &[3, 3, cfg.c_m + cfg.c_cell, 4 * cfg.c_cell], fan_in),
                bias: uniform_param(store, rng, "head.lstm.bias", &[4 * cfg.c_cell], fan_in),
                out_w: uniform_param(store, rng, "head.out_w", &[cfg.c_cell, 1], cfg.c_cell),
                out_b: uniform_param(store, rng, "head.out_b", &[1], cfg.c_cell),
            }
        } else {
            HeadParams::SingleLevel {
                out_w: uniform_param(store, rng, "head.out_w", &[cfg.c_m, 1], cfg.c_m),
                out_b: uniform_param(store, rng, "head.out_b", &[1], cfg.c_m),
            }
        }
    }
}

#[derive(Clone, Copy)]
pub struct ConvLstmState {
    pub hidden: TensorRef,
    pub cell: TensorRef,
}

pub fn zero_state(tape: &mut Tape, h: usize, w: usize, c_cell: usize) -> ConvLstmState {
    ConvLstmState {
        hidden: tape.constant(Tensor::zeros(&[h, w, c_cell])),
        cell: tape.constant(Tensor::zeros(&[h, w, c_cell])),
    }
}

/// Standard ConvLSTM cell: gates and candidate from a 3x3 convolution over
/// [x; h], sigmoid gates, tanh candidate and output squashing.
pub fn convlstm_step(
    tape: &mut Tape,
    x: TensorRef,
    state: ConvLstmState,
    kernel: TensorRef,
    bias: TensorRef,
    c_cell: usize,
) -> Result<ConvLstmState> {
    let joint = tape.concat_channels(&[x, state.hidden])?;
    let gates = tape.conv2d(joint, kernel, bias)?;
    let i_gate = tape.slice_channels(gates, 0, c_cell)?;
    let f_gate = tape.slice_channels(gates, c_cell, 2 * c_cell)?;
    let g_cand = tape.slice_channels(gates, 2 * c_cell, 3 * c_cell)?;
    let o_gate = tape.slice_channels(gates, 3 * c_cell, 4 * c_cell)?;
    let i_gate = tape.sigmoid(i_gate)?;
    let f_gate = tape.sigmoid(f_gate)?;
    let o_gate = tape.sigmoid(o_gate)?;
    let g_cand = tape.tanh(g_cand)?;
    let keep = tape.mul(f_gate, state.cell)?;
    let write = tape.mul(i_gate, g_cand)?;
    let cell = tape.add(keep, write)?;
    let bounded = tape.tanh(cell)?;
    let hidden = tape.mul(o_gate, bounded)?;
    Ok(ConvLstmState { hidden, cell })
}

/// Feed the levels through the ConvLSTM in the configured order and project
/// the final hidden state to one logit per cell.
pub fn fuse_levels(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &HeadParams,
    levels: &[TensorRef; 3],
    cfg: &RunConfig,
) -> Result<TensorRef> {
    let HeadParams::ConvLstm { kernel, bias, out_w, out_b } = params else {
        panic!("fuse_levels requires the ConvLSTM head");
    };
    let shape = tape.shape(levels[0]).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let mut state = zero_state(tape, h, w, cfg.c_cell);
    for &idx in &cfg.level_order {
        state = convlstm_step(
            tape,
            levels[idx],
            state,
            staged[kernel.index()],
            staged[bias.index()],
            cfg.c_cell,
        )?;
    }
    let flat = tape.reshape(state.hidden, &[h * w, cfg.c_cell])?;
    let logits = tape.matmul(flat, staged[out_w.index()])?;
    let logits = tape.add(logits, staged[out_b.index()])?;
    Ok(tape.reshape(logits, &[h, w])?)
}

/// Single-level head: 1x1 projection of Y to logits.
pub fn single_level_logits(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &HeadParams,
    y: TensorRef,
) -> Result<TensorRef> {
    let HeadParams::SingleLevel { out_w, out_b } = params else {
        panic!("single_level_logits requires the single-level head");
    };
    let shape = tape.shape(y).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(y, &[h * w, c])?;
    let logits = tape.matmul(flat, staged[out_w.index()])?;
    let logits = tape.add(logits, staged[out_b.index()])?;
    Ok(tape.reshape(logits, &[h, w])?)
}

/// Mean pixel-wise binary cross-entropy against a 0/1 mask, computed in
/// logit form.
pub fn bce_loss(tape: &mut Tape, logits: TensorRef, target: &Tensor) -> Result<TensorRef> {
    Ok(tape.bce_with_logits(logits, target)?)
}

/// Differentiable resize of an [H, W] logit map to (h0, w0).
pub fn upsample_logits(tape: &mut Tape, logits: TensorRef, h0: usize, w0: usize) -> Result<TensorRef> {
    let shape = tape.shape(logits).to_vec();
    let as_map = tape.reshape(logits, &[shape[0], shape[1], 1])?;
    let up = tape.bilinear_resize(as_map, h0, w0)?;
    Ok(tape.reshape(up, &[h0, w0])?)
}

/// Bilinear-upsample grid logits to the output size, apply the sigmoid,
/// and threshold into a binary mask. Pure value-level helper.
pub fn predict_mask(logits: &Tensor, out_h: usize, out_w: usize, threshold: f64) -> Tensor {
    assert!(logits.shape.len() == 2, "predict_mask expects [H, W] logits");
    assert!(0.0 < threshold && threshold < 1.0, "threshold must lie in (0, 1)");
    let (h, w) = (logits.shape[0], logits.shape[1]);
    let mut up = vec![0.0; out_h * out_w];
    kernels::bilinear_resize(&logits.data, h, w, 1, out_h, out_w, &mut up);
    let data = up
        .iter()
        .map(|&z| {
            let p = 1.0 / (1.0 + (-z).exp());
            f64::from(p > threshold)
        })
        .collect();
    Tensor::new(vec![out_h, out_w], data)
}
