//! Checkpoint container: an 8-byte magic, a little-endian u64 header
//! length, a JSON header, then the raw little-endian f64 payload of every
//! parameter in store order.
//!
//! The header records the full config, its hash, the seed, the init
//! scheme, the vocabulary, and each parameter's name and shape, so a
//! checkpoint is self-describing and loads reject any drift in parameter
//! inventory.

use crate::config::RunConfig;
use crate::error::{RefsegError, Result};
use crate::init::INIT_SCHEME;
use crate::model::Model;
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use tapegrad::Tensor;

const MAGIC: &[u8; 8] = b"RSEGCKP1";

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    config_hash: String,
    seed: u64,
    init_scheme: String,
    vocab: Vec<String>,
    params: Vec<ParamMeta>,
    best_val_iou: Option<f64>,
}

pub fn save(path: &Path, model: &Model, best_val_iou: Option<f64>) -> Result<()> {
    let header = Header {
        version: 1,
        config: model.cfg.clone(),
        config_hash: model.cfg.hash(),
        seed: model.cfg.seed,
        init_scheme: INIT_SCHEME.to_string(),
        vocab: model.vocab.tokens().to_vec(),
        params: model
            .store
            .entries()
            .iter()
            .map(|e| ParamMeta { name: e.name.clone(), shape: e.tensor.shape.clone() })
            .collect(),
        best_val_iou,
    };
    let header_json = serde_json::to_vec(&header).map_err(RefsegError::json("checkpoint header"))?;
    let mut file = std::fs::File::create(path)
        .map_err(RefsegError::io(format!("creating {}", path.display())))?;
    file.write_all(MAGIC).map_err(RefsegError::io("checkpoint magic"))?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(RefsegError::io("checkpoint header length"))?;
    file.write_all(&header_json).map_err(RefsegError::io("checkpoint header"))?;
    let mut payload = Vec::with_capacity(model.store.total_elements() * 8);
    for entry in model.store.entries() {
        for &v in &entry.tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(RefsegError::io("checkpoint payload"))?;
    Ok(())
}

/// Load a checkpoint and rebuild the model it describes.
/// Returns the model and the recorded best validation IoU, if any.
pub fn load(path: &Path) -> Result<(Model, Option<f64>)> {
    let bytes = std::fs::read(path).map_err(RefsegError::io(format!("reading {}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(RefsegError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16 + header_len;
    let header_bytes = bytes
        .get(16..header_end)
        .ok_or_else(|| RefsegError::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(RefsegError::json("checkpoint header"))?;
    if header.version != 1 {
        return Err(RefsegError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let vocab = Vocabulary::from_tokens(header.vocab.clone())?;
    let mut model = Model::new(header.config.clone(), vocab)?;

    let mut offset = header_end;
    let mut values = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let numel: usize = meta.shape.iter().product();
        let end = offset + numel * 8;
        let slice = bytes.get(offset..end).ok_or_else(|| {
            RefsegError::Checkpoint(format!("{}: truncated payload at {}", path.display(), meta.name))
        })?;
        let data: Vec<f64> = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((meta.name.clone(), Tensor::new(meta.shape.clone(), data)));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(RefsegError::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - offset
        )));
    }
    model.load_values(values)?;
    Ok((model, header.best_val_iou))
}

/// The config hash recorded in a checkpoint, without loading the payload.
pub fn peek_config_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(RefsegError::io(format!("reading {}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(RefsegError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(
        bytes
            .get(16..16 + header_len)
            .ok_or_else(|| RefsegError::Checkpoint("truncated header".into()))?,
    )
    .map_err(RefsegError::json("checkpoint header"))?;
    Ok(header.config_hash)
}
