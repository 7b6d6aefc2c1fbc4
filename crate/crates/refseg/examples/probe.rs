// scratch probe - removed before finalizing
use refseg::config::RunConfig;
use refseg::synth::Dataset;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let n_val: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let tag: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let root = std::path::PathBuf::from(format!("/root/scratch/probe_{n_train}_{n_val}"));
    if !root.join("manifest.jsonl").exists() {
        refseg::synth::build_dataset(&root, 7, n_train, n_val, 32).unwrap();
    }
    let dataset = Dataset::open(&root).unwrap();
    let cfg = RunConfig { epochs, learning_rate: lr, n_train, n_val, seed: 7 + tag, ..RunConfig::default() };
    let t = Instant::now();
    let out = std::path::PathBuf::from(format!("/root/scratch/probe_run_{tag}"));
    let result = refseg::train::train(&cfg, &dataset, &out).unwrap();
    println!("train {:.1}s  best val IoU {:.4}", t.elapsed().as_secs_f64(), result.best_val_iou);
    // epoch rows from the log
    let log = std::fs::read_to_string(&result.log_path).unwrap();
    for line in log.lines() {
        if line.contains("\"epoch\"") && line.contains("val_overall_iou") {
            println!("{line}");
        }
    }
    let k = result.loss_trace.len();
    println!("last losses: {:?}", &result.loss_trace[k.saturating_sub(4)..]);
}
