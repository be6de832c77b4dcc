use unifork::*;
use unifork::toyworld::*;
use std::time::Instant;

fn main() {
    // small matmul rate
    let (m, k, n) = (82usize, 64usize, 64usize);
    let a: Vec<f64> = (0..m*k).map(|i| (i as f64).sin()).collect();
    let b: Vec<f64> = (0..k*n).map(|i| (i as f64).cos()).collect();
    let iters = 40000;
    let store = ParamStore::new();
    let t = Instant::now();
    let mut sum = 0.0;
    for _ in 0..iters {
        let mut g = Graph::inference(&store);
        let an = g.input(Tensor::new(vec![m,k], a.clone()));
        let bn = g.input(Tensor::new(vec![k,n], b.clone()));
        let c = g.matmul(an, bn).unwrap();
        sum += g.value(c).data()[0];
    }
    let el = t.elapsed().as_secs_f64();
    println!("graph matmul 82x64x64: {:.2} GF/s ({sum:.0})", (2.0*(m*k*n*iters) as f64)/el/1e9);

    // packed 4-sample forward vs 4 single forwards
    let cfg = ModelConfig::toy_default();
    let model = ForkedTransformer::new(cfg.clone(), &mut rng::substream(1, "init")).unwrap();
    let v = cfg.vocab();
    let mut rng = rng::substream(2, "data");
    let samples: Vec<_> = (0..4).map(|_| {
        let scene = sample_scene(&mut rng, Curriculum::TwoObject);
        build_sample(&scene, Task::Gen, StageFormat::Pretrain, 0.0, &v, &mut rng)
    }).collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.tokens.len()).collect();
    let packed: Vec<SeqToken> = samples.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let reps = 30;
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::inference(&model.params);
        let _ = model.forward_features(&mut g, &packed, &lens, Branch::Gen, None).unwrap();
    }
    println!("packed 4-sample fwd: {:.2} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);
    let t = Instant::now();
    for _ in 0..reps {
        for s in &samples {
            let mut g = Graph::inference(&model.params);
            let _ = model.forward_features(&mut g, &s.tokens, &[s.tokens.len()], Branch::Gen, None).unwrap();
        }
    }
    println!("4 single fwds:       {:.2} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);
}
