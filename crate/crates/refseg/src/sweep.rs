//! Hyperparameter sweeps: one train+eval run per axis value with a shared
//! seed, emitted as CSV with header `axis,overall_iou,prec50`. A failed run
//! is recorded in its row and the sweep continues.

use crate::config::RunConfig;
use crate::error::{RefsegError, Result};
use crate::eval;
use crate::synth::Dataset;
use crate::train;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Feature-exchange rounds n in {0, 1, 2, 3}.
    Rounds,
    /// Graph-convolution depth in {0, 1, 2, 3}; 0 disables relational
    /// reasoning entirely.
    GraphLayers,
    /// The ablation grid over (EP, RAR, TGFE).
    Ablation,
}

impl SweepAxis {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "n-rounds" | "rounds" | "n_rounds" => Ok(SweepAxis::Rounds),
            "n-gc" | "graph-layers" | "n_gc" => Ok(SweepAxis::GraphLayers),
            "ablation" => Ok(SweepAxis::Ablation),
            other => Err(RefsegError::Config(format!(
                "unknown sweep axis {other} (expected n-rounds | n-gc | ablation)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: String,
    pub overall_iou: Option<f64>,
    pub prec50: Option<f64>,
}

/// The (label, config) grid for an axis.
pub fn axis_configs(base: &RunConfig, axis: SweepAxis) -> Vec<(String, RunConfig)> {
    match axis {
        SweepAxis::Rounds => (0..=3)
            .map(|n| {
                let cfg = RunConfig { exchange_rounds: n, tgfe_enabled: true, ..base.clone() };
                (format!("n={n}"), cfg)
            })
            .collect(),
        SweepAxis::GraphLayers => (0..=3)
            .map(|n| {
                let cfg = RunConfig {
                    rar_enabled: n > 0,
                    graph_layers: n.max(1),
                    ..base.clone()
                };
                (format!("n_gc={n}"), cfg)
            })
            .collect(),
        SweepAxis::Ablation => {
            let combos: [(&str, bool, bool, bool); 8] = [
                ("base", false, false, false),
                ("ep", true, false, false),
                ("rar", false, true, false),
                ("ep_rar", true, true, false),
                ("tgfe", false, false, true),
                ("ep_tgfe", true, false, true),
                ("rar_tgfe", false, true, true),
                ("full", true, true, true),
            ];
            combos
                .iter()
                .map(|&(label, ep, rar, tgfe)| {
                    let cfg = RunConfig {
                        ep_enabled: ep,
                        rar_enabled: rar,
                        tgfe_enabled: tgfe,
                        ..base.clone()
                    };
                    (label.to_string(), cfg)
                })
                .collect()
        }
    }
}

/// Run the sweep, writing per-run artifacts under `work_dir` and the CSV to
/// `csv_path`.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    dataset: &Dataset,
    work_dir: &Path,
    csv_path: &Path,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (idx, (label, cfg)) in axis_configs(base, axis).into_iter().enumerate() {
        let run_dir = work_dir.join(format!("run_{idx:02}_{label}"));
        let outcome = train::train(&cfg, dataset, &run_dir).and_then(|result| {
            let (model, _) = crate::checkpoint::load(&result.checkpoint_path)?;
            eval::evaluate(&model, dataset, "val", None)
        });
        match outcome {
            Ok(report) => rows.push(SweepRow {
                axis: label,
                overall_iou: Some(report.overall_iou),
                prec50: report.prec_at(0.5),
            }),
            Err(err) => {
                eprintln!("sweep run {label} failed: {err}");
                rows.push(SweepRow { axis: label, overall_iou: None, prec50: None });
            }
        }
    }
    let csv = to_csv(&rows);
    std::fs::write(csv_path, csv)
        .map_err(RefsegError::io(format!("writing {}", csv_path.display())))?;
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,overall_iou,prec50\n");
    for row in rows {
        let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(out, "{},{},{}", row.axis, fmt(row.overall_iou), fmt(row.prec50));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_axis_has_four_rows() {
        let configs = axis_configs(&RunConfig::default(), SweepAxis::Rounds);
        assert_eq!(configs.len(), 4);
        for (i, (label, cfg)) in configs.iter().enumerate() {
            assert_eq!(*label, format!("n={i}"));
            assert_eq!(cfg.exchange_rounds, i);
        }
    }

    #[test]
    fn ablation_axis_mirrors_the_toggle_grid() {
        let configs = axis_configs(&RunConfig::default(), SweepAxis::Ablation);
        assert_eq!(configs.len(), 8);
        assert_eq!(configs[0].0, "base");
        assert!(!configs[0].1.ep_enabled && !configs[0].1.rar_enabled && !configs[0].1.tgfe_enabled);
        assert_eq!(configs[7].0, "full");
        assert!(configs[7].1.ep_enabled && configs[7].1.rar_enabled && configs[7].1.tgfe_enabled);
    }

    #[test]
    fn csv_schema() {
        let rows = vec![
            SweepRow { axis: "n=0".into(), overall_iou: Some(0.5), prec50: Some(0.25) },
            SweepRow { axis: "n=1".into(), overall_iou: None, prec50: None },
        ];
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("axis,overall_iou,prec50"));
        assert_eq!(lines.next(), Some("n=0,0.500000,0.250000"));
        assert_eq!(lines.next(), Some("n=1,failed,failed"));
    }
}
