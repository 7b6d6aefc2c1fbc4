//! Visual stream: a small conv backbone tapped at three depths, each tap
//! aligned to the shallowest tap's grid and fused with an 8-D spatial
//! coordinate feature by a 1x1 convolution.
//!
//! The two stride-2 blocks sit at the front, so all taps share the
//! image_size/4 grid; deeper taps differ in depth, not resolution. The
//! tap-alignment resize stays in the path for non-default strides.

use crate::config::RunConfig;
use crate::error::{RefsegError, Result};
use crate::init::{relu_uniform_param, uniform_param};
use tapegrad::{ParamId, ParamStore, SplitMix64, Tape, Tensor, TensorRef};

pub const NUM_BLOCKS: usize = 6;
pub const BLOCK_STRIDES: [usize; NUM_BLOCKS] = [2, 2, 1, 1, 1, 1];
/// Blocks after which the three level taps are taken (0-based).
pub const TAP_BLOCKS: [usize; 3] = [1, 3, 5];

/// Per-cell coordinate feature: normalized [x_min, y_min, x_max, y_max,
/// x_center, y_center, 1/W, 1/H], positions mapped into [-1, 1].
pub fn coord_feature(h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1);
    let mut out = Tensor::zeros(&[h, w, 8]);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * 8;
            let x_min = 2.0 * j as f64 / w as f64 - 1.0;
            let x_max = 2.0 * (j + 1) as f64 / w as f64 - 1.0;
            let y_min = 2.0 * i as f64 / h as f64 - 1.0;
            let y_max = 2.0 * (i + 1) as f64 / h as f64 - 1.0;
            out.data[base] = x_min;
            out.data[base + 1] = y_min;
            out.data[base + 2] = x_max;
            out.data[base + 3] = y_max;
            out.data[base + 4] = (x_min + x_max) / 2.0;
            out.data[base + 5] = (y_min + y_max) / 2.0;
            out.data[base + 6] = 1.0 / w as f64;
            out.data[base + 7] = 1.0 / h as f64;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct VisParams {
    /// (kernel, bias) of each 3x3 conv block.
    pub blocks: Vec<(ParamId, ParamId)>,
    /// Per-level 1x1 coordinate-fusion conv; only requested levels exist.
    pub fuse: Vec<Option<(ParamId, ParamId)>>,
}

impl VisParams {
    /// `levels` lists which of the three taps get a fusion head.
    pub fn init(store: &mut ParamStore, cfg: &RunConfig, levels: &[usize], rng: &mut SplitMix64) -> Self {
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut in_ch = 3;
        for (b, &out_ch) in cfg.backbone_channels.iter().enumerate() {
            let fan_in = 3 * 3 * in_ch;
            let kernel = relu_uniform_param(store, rng, &format!("vis.block{b}.kernel"), &[3, 3, in_ch, out_ch], fan_in);
            let bias = uniform_param(store, rng, &format!("vis.block{b}.bias"), &[out_ch], fan_in);
            blocks.push((kernel, bias));
            in_ch = out_ch;
        }
        let mut fuse = vec![None; 3];
        for (level, &tap_block) in TAP_BLOCKS.iter().enumerate() {
            if !levels.contains(&level) {
                continue;
            }
            let tap_ch = cfg.backbone_channels[tap_block];
            let fan_in = tap_ch + 8;
            let kernel = uniform_param(
                store,
                rng,
                &format!("vis.fuse{level}.kernel"),
                &[1, 1, fan_in, cfg.c_v],
                fan_in,
            );
            let bias = uniform_param(store, rng, &format!("vis.fuse{level}.bias"), &[cfg.c_v], fan_in);
            fuse[level] = Some((kernel, bias));
        }
        VisParams { blocks, fuse }
    }
}

/// Run the conv stack and return the three taps, the deeper two resampled
/// to the first tap's grid.
pub fn backbone(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &VisParams,
    image: TensorRef,
) -> Result<[TensorRef; 3]> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] < 8 || shape[1] < 8 {
        return Err(RefsegError::Format(format!(
            "backbone input must be at least 8x8, got {shape:?}"
        )));
    }
    let mut x = image;
    let mut taps = Vec::with_capacity(3);
    for (b, (kernel, bias)) in params.blocks.iter().enumerate() {
        let conv = tape.conv2d_stride(x, staged[kernel.index()], staged[bias.index()], BLOCK_STRIDES[b])?;
        x = tape.relu(conv)?;
        if TAP_BLOCKS.contains(&b) {
            taps.push(x);
        }
    }
    let target = tape.shape(taps[0]).to_vec();
    let aligned1 = tape.bilinear_resize(taps[1], target[0], target[1])?;
    let aligned2 = tape.bilinear_resize(taps[2], target[0], target[1])?;
    Ok([taps[0], aligned1, aligned2])
}

/// Concatenate a tap with the coordinate feature and project to C_v with a
/// 1x1 convolution.
pub fn fuse_coords(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &VisParams,
    level: usize,
    tap: TensorRef,
    coords: TensorRef,
) -> Result<TensorRef> {
    let (kernel, bias) = params.fuse[level]
        .as_ref()
        .unwrap_or_else(|| panic!("level {level} has no fusion parameters"));
    let tap_shape = tape.shape(tap).to_vec();
    let coord_shape = tape.shape(coords).to_vec();
    if tap_shape[..2] != coord_shape[..2] {
        return Err(RefsegError::Tensor(tapegrad::TensorError::ShapeMismatch {
            op: "fuse_coords",
            lhs: tap_shape,
            rhs: coord_shape,
        }));
    }
    let stacked = tape.concat_channels(&[tap, coords])?;
    Ok(tape.conv2d(stacked, staged[kernel.index()], staged[bias.index()])?)
}

/// Full visual pass: taps, alignment, coordinate fusion. Returns the fused
/// per-level maps for every level that has fusion parameters.
pub fn forward(
    tape: &mut Tape,
    staged: &[TensorRef],
    params: &VisParams,
    image: &Tensor,
) -> Result<Vec<Option<TensorRef>>> {
    let image = tape.constant(image.clone());
    let taps = backbone(tape, staged, params, image)?;
    let grid = tape.shape(taps[0]).to_vec();
    let coords = tape.constant(coord_feature(grid[0], grid[1]));
    let mut out = vec![None; 3];
    for level in 0..3 {
        if params.fuse[level].is_some() {
            out[level] = Some(fuse_coords(tape, staged, params, level, taps[level], coords)?);
        }
    }
    Ok(out)
}
