// scratch diagnostics - removed before finalizing
use refseg::config::RunConfig;
use refseg::model::Model;
use refseg::synth::Dataset;
use refseg::vocab::Vocabulary;
use refseg::{lang, vis, cmpc, tgfe};
use tapegrad::Tape;

fn stats(tag: &str, v: &[f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    // spatial spread: std
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    println!("{tag:<16} rms {rms:>10.5}  std {:>10.5}", var.sqrt());
}

fn main() {
    let root = std::path::PathBuf::from("/root/scratch/probe_300_100");
    let dataset = Dataset::open(&root).unwrap();
    let cfg = RunConfig::default();
    let model = Model::new(cfg.clone(), Vocabulary::closed()).unwrap();
    let s = dataset.load(dataset.split("train")[0]).unwrap();
    let mut tape = Tape::no_grad();
    let staged = model.store.stage(&mut tape);

    let lang_out = lang::forward(&mut tape, &staged, &model.lang, &s.token_ids, &cfg).unwrap();
    stats("L", &tape.value(lang_out.features).data);
    stats("q", &tape.value(lang_out.entity_context).data);
    stats("R", &tape.value(lang_out.relational).data);
    stats("s", &tape.value(lang_out.necessary).data);

    // taps before fusion
    let image_ref = tape.constant(s.image.clone());
    let taps = vis::backbone(&mut tape, &staged, &model.vis, image_ref).unwrap();
    for (i, t) in taps.iter().enumerate() { stats(&format!("tap{i}"), &tape.value(*t).data); }

    let levels = vis::forward(&mut tape, &staged, &model.vis, &s.image).unwrap();
    let mut ys = Vec::new();
    for (i, l) in levels.iter().enumerate() {
        let x = l.unwrap();
        stats(&format!("X{}", i + 3), &tape.value(x).data);
        let y = cmpc::forward(&mut tape, &staged, &model.cmpc[i], x, &lang_out, &cfg, i, None).unwrap();
        stats(&format!("Y{}", i + 3), &tape.value(y).data);
        ys.push(y);
    }
    // M for level 0 via EP directly
    let x0 = levels[0].unwrap();
    let xf = tape.reshape(x0, &[64, cfg.c_v]).unwrap();
    let m = cmpc::entity_perception(&mut tape, lang_out.entity_context, xf, &staged, model.cmpc[0].ep.as_ref().unwrap()).unwrap();
    stats("M(l0)", &tape.value(m).data);
    let g = cmpc::build_adjacency(&mut tape, m, lang_out.relational, &staged, model.cmpc[0].rar.as_ref().unwrap()).unwrap();
    stats("B", &tape.value(g.affinity).data);
    stats("A", &tape.value(g.adjacency).data);

    let flat: Vec<_> = ys.iter().map(|&y| tape.reshape(y, &[64, cfg.c_m]).unwrap()).collect();
    let ex = tgfe::forward(&mut tape, [flat[0], flat[1], flat[2]], lang_out.necessary, &staged, model.tgfe.as_ref().unwrap(), &cfg, 1, None).unwrap();
    for (i, e) in ex.iter().enumerate() { stats(&format!("Y{}'", i + 3), &tape.value(*e).data); }

    let maps: Vec<_> = ex.iter().map(|&f| tape.reshape(f, &[8, 8, cfg.c_m]).unwrap()).collect();
    let logits = refseg::head::fuse_levels(&mut tape, &staged, &model.head, &[maps[0], maps[1], maps[2]], &cfg).unwrap();
    stats("logits", &tape.value(logits).data);
}
