//! Inference over a dataset split and metric reporting.

use crate::error::{RefsegError, Result};
use crate::metrics::{intersection_union, EvalAccumulator, EvalReport};
use crate::model::Model;
use crate::synth::Dataset;
use rayon::prelude::*;

/// Run the model over a split and aggregate metrics. Samples are scored in
/// parallel and reduced in manifest order, so the report is independent of
/// worker count.
pub fn evaluate(model: &Model, dataset: &Dataset, split: &str, limit: Option<usize>) -> Result<EvalReport> {
    if model.vocab != dataset.vocab {
        return Err(RefsegError::VocabMismatch(format!(
            "checkpoint has {} tokens, dataset has {}",
            model.vocab.len(),
            dataset.vocab.len()
        )));
    }
    let mut records = dataset.split(split);
    if let Some(limit) = limit {
        records.truncate(limit);
    }
    if records.is_empty() {
        return Err(RefsegError::Format(format!("split {split} has no samples")));
    }
    let counts: Vec<(u64, u64)> = records
        .par_iter()
        .map(|record| -> Result<(u64, u64)> {
            let sample = dataset.load(record)?;
            let prediction = model.predict(&sample.token_ids, &sample.image)?;
            Ok(intersection_union(&prediction.mask, &sample.mask)?)
        })
        .collect::<Result<_>>()?;
    let mut acc = EvalAccumulator::new();
    for (inter, union) in counts {
        acc.add_counts(inter, union);
    }
    acc.finalize()
}
