// scratch diagnostics - removed before finalizing
use refseg::config::RunConfig;
use refseg::model::Model;
use refseg::synth::Dataset;
use refseg::vocab::Vocabulary;
use tapegrad::AdamState;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let root = std::path::PathBuf::from("/root/scratch/probe_300_100");
    let dataset = Dataset::open(&root).unwrap();
    let cfg = RunConfig { learning_rate: lr, ..RunConfig::default() };
    let mut model = Model::new(cfg.clone(), Vocabulary::closed()).unwrap();
    let samples: Vec<_> = dataset.split("train").iter().take(8).map(|r| dataset.load(r).unwrap()).collect();
    let mut adam = AdamState::new(&model.store, lr, 0.0);
    for step in 0..steps {
        let mut mean: Vec<Vec<f64>> = Vec::new();
        let mut ltot = 0.0;
        for s in &samples {
            let (l, g) = model.train_step(s).unwrap();
            ltot += l;
            if mean.is_empty() { mean = g; } else {
                for (a, b) in mean.iter_mut().zip(&g) { for (x, y) in a.iter_mut().zip(b) { *x += y; } }
            }
        }
        for g in &mut mean { for v in g.iter_mut() { *v /= 8.0; } }
        adam.step(&mut model.store, &mean);
        if step % 50 == 0 || step == steps - 1 {
            // IoU on the batch
            let mut inter = 0u64; let mut uni = 0u64;
            for s in &samples {
                let p = model.predict(&s.token_ids, &s.image).unwrap();
                let (i, u) = refseg::metrics::intersection_union(&p.mask, &s.mask).unwrap();
                inter += i; uni += u;
            }
            println!("step {step:>4} loss {:.4} batch IoU {:.4}", ltot / 8.0, inter as f64 / uni as f64);
        }
    }
}
