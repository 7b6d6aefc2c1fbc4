//! Training loop: per-sample tapes evaluated in parallel across a batch,
//! gradients averaged in sample order (so results are independent of
//! worker count), Adam updates, JSONL logging, and best-validation
//! checkpointing.

use crate::config::RunConfig;
use crate::error::{RefsegError, Result};
use crate::eval;
use crate::model::Model;
use crate::synth::{Dataset, LoadedSample};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use tapegrad::{derive_seed, AdamState, SplitMix64};

#[derive(Serialize)]
struct StepLog<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    epoch: usize,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct EpochLog<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    epoch: usize,
    val_overall_iou: f64,
    best: bool,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    sample_ids: &'a [usize],
    expressions: Vec<&'a str>,
    losses: &'a [f64],
    config_hash: &'a str,
}

pub struct TrainResult {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub best_val_iou: f64,
    /// Per-step mean batch losses, in order.
    pub loss_trace: Vec<f64>,
}

/// Train on the dataset's train split, evaluating on the val split after
/// each epoch and keeping the best-validation checkpoint.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(RefsegError::io(format!("creating {}", out_dir.display())))?;
    let mut model = Model::new(cfg.clone(), dataset.vocab.clone())?;
    let mut adam = AdamState::new(&model.store, cfg.learning_rate, cfg.weight_decay);

    let train_records = dataset.split("train");
    if train_records.is_empty() {
        return Err(RefsegError::Format("dataset has no train split".into()));
    }
    // Assets are small; load once so epochs do not re-read files.
    let samples: Vec<LoadedSample> = train_records
        .iter()
        .map(|r| dataset.load(r))
        .collect::<Result<_>>()?;
    let val_records = dataset.split("val");

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)
        .map_err(RefsegError::io(format!("creating {}", log_path.display())))?;
    let checkpoint_path = out_dir.join("best.ckpt");

    let mut loss_trace = Vec::new();
    let mut best_val_iou = f64::NEG_INFINITY;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = SplitMix64::new(derive_seed(cfg.seed, "shuffle", epoch as u64));
        shuffle_rng.shuffle(&mut order);

        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&idx| model.train_step(&samples[idx]))
                .collect();
            let mut losses = Vec::with_capacity(batch.len());
            let mut mean_grads: Vec<Vec<f64>> = Vec::new();
            for result in results {
                let (loss, grads) = result?;
                losses.push(loss);
                if mean_grads.is_empty() {
                    mean_grads = grads;
                } else {
                    for (acc, g) in mean_grads.iter_mut().zip(&grads) {
                        for (a, &v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut mean_grads {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let mean_loss: f64 = losses.iter().sum::<f64>() * scale;

            if !mean_loss.is_finite() {
                let dump_path = out_dir.join("nan_dump.json");
                let ids: Vec<usize> = batch.iter().map(|&i| samples[i].id).collect();
                let expressions: Vec<&str> = batch
                    .iter()
                    .map(|&i| train_records[i].expression.as_str())
                    .collect();
                let dump = NanDump {
                    epoch,
                    step: global_step,
                    sample_ids: &ids,
                    expressions,
                    losses: &losses,
                    config_hash: &model.cfg.hash(),
                };
                std::fs::write(
                    &dump_path,
                    serde_json::to_string_pretty(&dump).map_err(RefsegError::json("nan dump"))?,
                )
                .map_err(RefsegError::io(format!("writing {}", dump_path.display())))?;
                return Err(RefsegError::NanLoss { epoch, step: global_step, dump: dump_path });
            }

            adam.step(&mut model.store, &mean_grads);
            loss_trace.push(mean_loss);
            writeln!(
                log,
                "{}",
                serde_json::to_string(&StepLog { kind: "step", epoch, step: global_step, loss: mean_loss })
                    .map_err(RefsegError::json("step log"))?
            )
            .map_err(RefsegError::io("writing training log"))?;
            global_step += 1;
        }

        let val_iou = if val_records.is_empty() {
            f64::NAN
        } else {
            eval::evaluate(&model, dataset, "val", None)?.overall_iou
        };
        let improved = val_records.is_empty() || val_iou > best_val_iou;
        if improved {
            best_val_iou = if val_iou.is_nan() { 0.0 } else { val_iou };
            crate::checkpoint::save(&checkpoint_path, &model, Some(best_val_iou))?;
        }
        writeln!(
            log,
            "{}",
            serde_json::to_string(&EpochLog {
                kind: "epoch",
                epoch,
                val_overall_iou: val_iou,
                best: improved
            })
            .map_err(RefsegError::json("epoch log"))?
        )
        .map_err(RefsegError::io("writing training log"))?;
    }

    Ok(TrainResult { checkpoint_path, log_path, best_val_iou, loss_trace })
}
