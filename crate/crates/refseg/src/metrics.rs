//! Overall IoU and Prec@X.
//!
//! Overall IoU is the ratio of summed intersections to summed unions over
//! the whole evaluation set — not the mean of per-sample IoUs. Prec@X is
//! the fraction of samples whose own IoU strictly exceeds X.

use crate::error::{RefsegError, Result};
use serde::{Deserialize, Serialize};
use tapegrad::Tensor;

pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn check_binary_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(RefsegError::Format(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    for t in [pred, gt] {
        if t.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(RefsegError::Format("masks must be binary (0/1)".into()));
        }
    }
    Ok(())
}

/// Pixel counts of the intersection and union of two binary masks.
pub fn intersection_union(pred: &Tensor, gt: &Tensor) -> Result<(u64, u64)> {
    check_binary_pair(pred, gt)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0.0, g != 0.0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok((inter, union))
}

/// Per-sample IoU; defined as 1.0 when both masks are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (inter, union) = intersection_union(pred, gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Ratio of summed intersections to summed unions.
pub fn overall_iou(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(RefsegError::Format("overall_iou of an empty sample set".into()));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (pred, gt) in pairs {
        let (i, u) = intersection_union(pred, gt)?;
        inter += i;
        union += u;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of per-sample IoUs strictly above the threshold.
pub fn prec_at(ious: &[f64], threshold: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_iou: f64,
    /// Keyed "0.5" .. "0.9" in threshold order.
    pub prec: Vec<(String, f64)>,
    pub per_sample_ious: Vec<f64>,
    pub samples: usize,
}

/// Streaming accumulator over (prediction, ground truth) pairs.
#[derive(Default, Clone, Debug)]
pub struct EvalAccumulator {
    inter: u64,
    union: u64,
    ious: Vec<f64>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        let (i, u) = intersection_union(pred, gt)?;
        self.add_counts(i, u);
        Ok(())
    }

    pub fn add_counts(&mut self, inter: u64, union: u64) {
        self.inter += inter;
        self.union += union;
        self.ious.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }

    pub fn finalize(self) -> Result<EvalReport> {
        if self.ious.is_empty() {
            return Err(RefsegError::Format("no samples evaluated".into()));
        }
        let overall = if self.union == 0 { 1.0 } else { self.inter as f64 / self.union as f64 };
        let prec = PREC_THRESHOLDS
            .iter()
            .map(|&t| (format!("{t:.1}"), prec_at(&self.ious, t)))
            .collect();
        Ok(EvalReport {
            overall_iou: overall,
            prec,
            samples: self.ious.len(),
            per_sample_ious: self.ious,
        })
    }
}

impl EvalReport {
    pub fn prec_at(&self, threshold: f64) -> Option<f64> {
        let key = format!("{threshold:.1}");
        self.prec.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>8}\n", "metric", "value"));
        out.push_str(&format!("{:<12} {:>8.4}\n", "overall_iou", self.overall_iou));
        for (k, v) in &self.prec {
            out.push_str(&format!("{:<12} {:>8.4}\n", format!("prec@{k}"), v));
        }
        out.push_str(&format!("{:<12} {:>8}\n", "samples", self.samples));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: [usize; 2], bits: &[u8]) -> Tensor {
        Tensor::new(shape.to_vec(), bits.iter().map(|&b| f64::from(b)).collect())
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask([2, 2], &[1, 0, 1, 1]);
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask([2, 2], &[1, 0, 0, 0]);
        let b = mask([2, 2], &[0, 1, 0, 0]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn two_pixel_overlap_case() {
        // pred = {a, b}, gt = {b, c} -> |{b}| / |{a, b, c}| = 1/3
        let pred = mask([1, 3], &[1, 1, 0]);
        let gt = mask([1, 3], &[0, 1, 1]);
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_is_one() {
        let z = mask([2, 2], &[0, 0, 0, 0]);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = mask([1, 2], &[1, 0]);
        let b = mask([2, 1], &[1, 0]);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn iou_is_symmetric() {
        let a = mask([2, 3], &[1, 1, 0, 0, 1, 0]);
        let b = mask([2, 3], &[1, 0, 0, 1, 1, 0]);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }

    #[test]
    fn overall_iou_is_ratio_of_sums_not_mean() {
        // (I, U) = (1, 2) and (3, 4): overall = 4/6, mean would be 0.625.
        let s1 = (mask([1, 2], &[1, 1]), mask([1, 2], &[1, 0]));
        let s2 = (mask([1, 4], &[1, 1, 1, 0]), mask([1, 4], &[1, 1, 1, 1]));
        assert_eq!(iou(&s1.0, &s1.1).unwrap(), 0.5);
        assert_eq!(iou(&s2.0, &s2.1).unwrap(), 0.75);
        let overall = overall_iou(&[s1, s2]).unwrap();
        assert!((overall - 4.0 / 6.0).abs() < 1e-15);
        assert!((overall - 0.625).abs() > 1e-3);
    }

    #[test]
    fn overall_iou_singleton_equals_iou() {
        let pair = (mask([2, 2], &[1, 1, 0, 0]), mask([2, 2], &[1, 0, 1, 0]));
        let single = iou(&pair.0, &pair.1).unwrap();
        assert_eq!(overall_iou(&[pair]).unwrap(), single);
    }

    #[test]
    fn overall_iou_empty_set_is_error() {
        assert!(overall_iou(&[]).is_err());
    }

    #[test]
    fn prec_counting_and_strictness() {
        let ious = [0.55, 0.65, 0.95];
        assert!((prec_at(&ious, 0.6) - 2.0 / 3.0).abs() < 1e-15);
        // Strict inequality: a sample exactly at the threshold does not count.
        assert_eq!(prec_at(&[0.5, 0.7], 0.5), 0.5);
    }

    #[test]
    fn report_prec_is_nonincreasing() {
        let mut acc = EvalAccumulator::new();
        for (i, u) in [(1u64, 2u64), (3, 4), (9, 10), (0, 5), (7, 8)] {
            acc.add_counts(i, u);
        }
        let report = acc.finalize().unwrap();
        let values: Vec<f64> = report.prec.iter().map(|(_, v)| *v).collect();
        for w in values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert_eq!(report.prec.len(), PREC_THRESHOLDS.len());
    }
}
