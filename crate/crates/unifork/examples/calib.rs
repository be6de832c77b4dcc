use unifork::ablate::*;
use unifork::sample::SamplerConfig;
use unifork::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let cfg = AblationConfig {
        base: ModelConfig::toy_default(),
        steps_per_task: steps,
        batch_size: batch,
        lr,
        seeds: vec![1],
        eval_n_per_prompt: 2,
        sampler: SamplerConfig { cfg_scale: 2.0, temperature: 1.0, top_k: 0, seed: 0 },
        ..Default::default()
    };
    let variants = std::env::var("CALIB_VARIANTS").unwrap_or_else(|_| "unifork,fully_shared".into());
    for kind in VariantKind::ALL.into_iter().filter(|k| variants.contains(k.name())) {
        let t0 = Instant::now();
        let trained = train_variant(kind, &cfg, 1).unwrap();
        let t_train = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let row = evaluate_variant(&trained, &cfg).unwrap();
        let t_eval = t0.elapsed().as_secs_f64();
        println!("{}: train {:.0}s eval {:.0}s", kind.name(), t_train, t_eval);
        if let Some(g) = &row.gen {
            println!("  gen: overall {:.3} single {:.3} two {:.3} colors {:.3} pos {:.3} attr {:.3} parsefail {:.3} loss {:?}",
                g.overall, g.single_object, g.two_objects, g.colors, g.position, g.color_attri, g.parse_failure_rate, row.final_gen_loss);
        }
        if let Some(u) = &row.und {
            println!("  und: exact {:.3} shape {:.3} color {:.3} pos {:.3} loss {:?}",
                u.exact, u.shape, u.color, u.position, row.final_und_loss);
        }
        // tail of training log
        let tail: Vec<String> = trained.log.iter().rev().take(4).map(|r| format!("{:?}:{:.3}", r.task, r.loss)).collect();
        println!("  log tail: {}", tail.join(" "));
    }
}
