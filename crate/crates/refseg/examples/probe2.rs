// scratch diagnostics - removed before finalizing
use refseg::config::RunConfig;
use refseg::model::Model;
use refseg::synth::Dataset;
use refseg::vocab::Vocabulary;
use tapegrad::{Tape, AdamState};

fn rms(v: &[f64]) -> f64 { (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt() }

fn main() {
    let root = std::path::PathBuf::from("/root/scratch/probe_300_100");
    let dataset = Dataset::open(&root).unwrap();
    let cfg = RunConfig { epochs: 6, learning_rate: 3e-3, ..RunConfig::default() };
    let mut model = Model::new(cfg.clone(), Vocabulary::closed()).unwrap();
    let recs = dataset.split("train");
    let samples: Vec<_> = recs.iter().take(64).map(|r| dataset.load(r).unwrap()).collect();

    let stats = |model: &Model, tag: &str| {
        let s = &samples[0];
        let mut tape = Tape::no_grad();
        let staged = model.store.stage(&mut tape);
        let out = model.forward(&mut tape, &staged, &s.token_ids, &s.image, None).unwrap();
        let logits = tape.value(out.grid_logits);
        println!("[{tag}] grid logits: rms {:.4} min {:.3} max {:.3}", rms(&logits.data),
            logits.data.iter().cloned().fold(f64::INFINITY, f64::min),
            logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        // walk the tape nodes to find interesting shapes
        let pred = model.predict(&s.token_ids, &s.image).unwrap();
        let area: f64 = pred.mask.data.iter().sum();
        let gt: f64 = s.mask.data.iter().sum();
        println!("[{tag}] mask area {area} vs gt {gt}");
    };
    stats(&model, "init");

    let mut adam = AdamState::new(&model.store, cfg.learning_rate, cfg.weight_decay);
    for step in 0..400 {
        let batch: Vec<_> = (0..8).map(|i| &samples[(step * 8 + i) % samples.len()]).collect();
        let mut mean: Vec<Vec<f64>> = Vec::new();
        let mut ltot = 0.0;
        for s in &batch {
            let (l, g) = model.train_step(s).unwrap();
            ltot += l;
            if mean.is_empty() { mean = g; } else {
                for (a, b) in mean.iter_mut().zip(&g) { for (x, y) in a.iter_mut().zip(b) { *x += y; } }
            }
        }
        for g in &mut mean { for v in g.iter_mut() { *v /= 8.0; } }
        adam.step(&mut model.store, &mean);
        if step % 100 == 99 { println!("step {step}: loss {:.4}", ltot / 8.0); stats(&model, &format!("s{step}")); }
    }
}
