use unifork::*;
use unifork::toyworld::*;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::toy_default();
    let model = ForkedTransformer::new(cfg.clone(), &mut rng::substream(1, "init")).unwrap();
    let v = cfg.vocab();
    let mut rng = rng::substream(2, "data");
    let scene = sample_scene(&mut rng, Curriculum::TwoObject);
    let s = build_sample(&scene, Task::Gen, StageFormat::Pretrain, 0.0, &v, &mut rng);
    println!("gen sample len {}", s.tokens.len());
    // forward-only
    let t0 = Instant::now();
    let n = 50;
    for _ in 0..n {
        let _ = model.forward(&s.tokens, Branch::Gen).unwrap();
    }
    println!("inference forward: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);
    // forward+backward of a full loss
    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new(&model.params);
        let (_, f) = model.forward_features(&mut g, &s.tokens, &[s.tokens.len()], Branch::Gen, None).unwrap();
        // select cell predictors
        let cells: Vec<usize> = s.tokens.iter().enumerate().filter(|(_,t)| matches!(t, SeqToken::Cell(_))).map(|(i,_)| i-1).collect();
        let sel = g.select_rows(f, &cells);
        let codes: Vec<Vec<u16>> = s.tokens.iter().filter_map(|t| match t { SeqToken::Cell(sym) => Some(rvq_encode(*sym, 2, 64).unwrap()), _ => None }).collect();
        let logits = model.rvq_head_forward(&mut g, sel, &codes).unwrap();
        let targets: Vec<usize> = codes.iter().flatten().map(|&c| c as usize).collect();
        let mask = vec![true; targets.len()];
        let ce = g.cross_entropy(logits, &targets, &mask).unwrap();
        let _ = g.backward(ce).unwrap();
    }
    println!("train fwd+bwd:     {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);
}
