//! Single-image inference with visualization exports: the predicted mask,
//! per-level adjacency and vertex-to-word affinity maps (PGM heatmaps and
//! CSV), and pooling-weight maps per level and exchange round.

use crate::error::{RefsegError, Result};
use crate::model::{ForwardTrace, Model};
use crate::pnm;
use std::path::{Path, PathBuf};
use tapegrad::Tensor;

pub struct InferOutput {
    pub mask_path: PathBuf,
    pub exports: Vec<PathBuf>,
    /// Words that fell back to `<unk>`.
    pub unknown_words: Vec<String>,
    pub mask: Tensor,
}

fn write_csv(path: &Path, tensor: &Tensor) -> Result<()> {
    assert_eq!(tensor.shape.len(), 2);
    let cols = tensor.shape[1];
    let mut text = String::new();
    for row in tensor.data.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(RefsegError::io(format!("writing {}", path.display())))
}

/// Run the model on one image/expression pair and write the mask plus all
/// affinity exports into `out_dir`.
pub fn infer(model: &Model, image_path: &Path, expression: &str, out_dir: &Path) -> Result<InferOutput> {
    std::fs::create_dir_all(out_dir)
        .map_err(RefsegError::io(format!("creating {}", out_dir.display())))?;
    let image = pnm::read_ppm(image_path)?;
    let (tokens, unknown_words) = model.vocab.tokenize_with_warnings(expression);

    let mut trace = ForwardTrace::default();
    let prediction = model.predict_traced(&tokens, &image, Some(&mut trace))?;

    let mask_path = out_dir.join("mask.pgm");
    pnm::write_mask_pgm(&mask_path, &prediction.mask)?;

    let mut exports = Vec::new();
    // Level indices are reported as 3..5, matching backbone tap depth.
    for level in &trace.levels {
        let tag = level.level + 3;
        if let Some(b1) = &level.vertex_to_word {
            let pgm = out_dir.join(format!("b1_l{tag}.pgm"));
            let csv = out_dir.join(format!("b1_l{tag}.csv"));
            pnm::write_heatmap_pgm(&pgm, b1)?;
            write_csv(&csv, b1)?;
            exports.push(pgm);
            exports.push(csv);
        }
        if let Some(adj) = &level.adjacency {
            let pgm = out_dir.join(format!("a_l{tag}.pgm"));
            let csv = out_dir.join(format!("a_l{tag}.csv"));
            pnm::write_heatmap_pgm(&pgm, adj)?;
            write_csv(&csv, adj)?;
            exports.push(pgm);
            exports.push(csv);
        }
    }
    for pool in &trace.pools {
        let n = pool.weights.numel();
        let side = (n as f64).sqrt() as usize;
        if side * side == n {
            let map = Tensor::new(vec![side, side], pool.weights.data.clone());
            let pgm = out_dir.join(format!("lambda_l{}_r{}.pgm", pool.level + 3, pool.round + 1));
            pnm::write_heatmap_pgm(&pgm, &map)?;
            exports.push(pgm);
        }
    }
    Ok(InferOutput { mask_path, exports, unknown_words, mask: prediction.mask })
}
