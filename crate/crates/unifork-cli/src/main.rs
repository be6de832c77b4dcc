//! Experiment command line: gradient checking, staged training, the
//! architecture ablation, alignment probing, qualitative sampling, and
//! suite evaluation. Every subcommand is deterministic given its flags and
//! writes its outputs exactly once into a fresh directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use unifork::ablate::{self, AblationConfig, VariantKind};
use unifork::checkpoint::{load_model, save_model};
use unifork::model::ModelConfig;
use unifork::probe::{
    alignment_curve, curve_shape, write_curves_csv, Metric, ProbeConfig, ProbeTask, ShapeReport,
    TextRef,
};
use unifork::rng::keyed;
use unifork::sample::{
    default_suite, sample_images, score_generation, score_understanding, SamplerConfig,
};
use unifork::toyworld::{
    caption_template, caption_to_string, grid_ascii, parse, sample_scene, Curriculum, Scene,
    StageFormat,
};
use unifork::train::{self, apply_stage, write_log_csv, ProceduralSource, StagePlan};

#[derive(Parser)]
#[command(name = "unifork", about = "Y-shaped unified understanding/generation transformer on a procedural toy world", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every parameter class of the model.
    Gradcheck(GradcheckArgs),
    /// Run the three-stage pipeline from a stage-plan file.
    Train(TrainArgs),
    /// Train and evaluate the four architecture variants.
    Ablate(AblateArgs),
    /// Layer-wise mutual-kNN alignment curves for a checkpoint.
    Probe(ProbeArgs),
    /// Sample grids for random prompts and dump text art + JSON.
    Sample(SampleArgs),
    /// Generation and understanding suite scores for a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory (created fresh; joined to $UNIFORK_OUT_ROOT if relative).
    #[arg(long)]
    out: PathBuf,
    /// Replace the output directory if it already exists.
    #[arg(long)]
    overwrite: bool,
}

impl OutDir {
    fn prepare(&self) -> Result<PathBuf> {
        let mut dir = self.out.clone();
        if dir.is_relative() {
            if let Ok(root) = std::env::var("UNIFORK_OUT_ROOT") {
                dir = Path::new(&root).join(dir);
            }
        }
        if dir.exists() {
            if !self.overwrite {
                bail!("output directory {} exists (use --overwrite)", dir.display());
            }
            fs::remove_dir_all(&dir)
                .with_context(|| format!("removing {}", dir.display()))?;
        }
        if let Some(parent) = dir.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config JSON (defaults to the built-in toy config).
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Total sampled coordinates across all tensors.
    #[arg(long, default_value_t = 6000)]
    budget: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage-plan file (see configs/desk.cfg and configs/table1.cfg).
    #[arg(long)]
    stage_config: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Topology to train: unifork, fully_shared, gen_expert, und_expert.
    #[arg(long, default_value = "unifork")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long, default_value_t = 2500)]
    steps_per_task: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    n_per_prompt: usize,
    #[arg(long, default_value_t = 2.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 7)]
    suite_seed: u64,
    #[arg(long, default_value_t = 48)]
    und_scenes: usize,
    /// Also write a checkpoint per trained variant.
    #[arg(long)]
    save_checkpoints: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint base path (without .ufrk/.json extension).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task to probe: both, gen, or und.
    #[arg(long, default_value = "both")]
    task: String,
    /// Number of probe prompts B.
    #[arg(long, default_value_t = 500)]
    b: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// euclidean or cosine.
    #[arg(long, default_value = "euclidean")]
    metric: String,
    /// Score each layer against its own text feature instead of the final
    /// layer's.
    #[arg(long)]
    per_layer_text: bool,
    /// Probe model-sampled images instead of ground-truth renders.
    #[arg(long)]
    sampled_images: bool,
    #[arg(long, default_value_t = 2.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_prompts: usize,
    #[arg(long, default_value_t = 1)]
    n_per_prompt: usize,
    #[arg(long, default_value_t = 2.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 2)]
    n_per_prompt: usize,
    #[arg(long, default_value_t = 2.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    suite_seed: u64,
    #[arg(long, default_value_t = 48)]
    und_scenes: usize,
    /// Caption prompt format the checkpoint was trained with.
    #[arg(long, default_value = "pretrain")]
    und_format: String,
    #[command(flatten)]
    out: OutDir,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    };
    if let Err(e) = result {
        let record = serde_json::json!({ "error": format!("{e:#}") });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => ModelConfig::toy_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = load_config(&a.model_config)?;
    let report = train::gradcheck_model(&cfg, a.seed, a.budget, a.tol)?;
    for t in &report.tensors {
        println!(
            "{:40} checked {:4} passed {:4} max_rel_err {:.3e}",
            t.name, t.checked, t.passed, t.max_rel_err
        );
    }
    println!(
        "gradcheck: {} ({} coordinates, tol {:.1e}, max rel err {:.3e})",
        if report.pass() { "PASS" } else { "FAIL" },
        report.total_checked(),
        report.tol,
        report.max_rel_err()
    );
    if !report.pass() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dir = a.out.prepare()?;
    let cfg = load_config(&a.model_config)?;
    let variant = VariantKind::parse(&a.variant)
        .with_context(|| format!("unknown variant `{}`", a.variant))?;
    let plans: Vec<StagePlan> = train::load_stage_file(&a.stage_config)?;
    let mut model = ablate::build_variant(variant, &cfg, a.seed)?;
    let mut src = ProceduralSource::new(a.seed, &cfg);
    let mut log = Vec::new();
    let mut step0 = 0u64;
    for plan in &plans {
        let mut plan = plan.clone();
        // Experts only ever see their own task's data.
        let (g, u) = plan.data_mix;
        plan.data_mix = (
            if variant.trains_gen() { g } else { 0.0 },
            if variant.trains_und() { u } else { 0.0 },
        );
        if plan.data_mix == (0.0, 0.0) {
            continue;
        }
        apply_stage(&mut model, &plan, &mut src, step0, a.seed, &mut log)?;
        step0 += plan.steps as u64;
        save_model(&model, &dir.join(plan.kind.section()))?;
        println!("{} done ({} steps)", plan.kind.section(), plan.steps);
    }
    save_model(&model, &dir.join("final"))?;
    let mut csv = fs::File::create(dir.join("train_log.csv"))?;
    write_log_csv(&log, &mut csv)?;
    println!("trained {} steps; outputs in {}", step0, dir.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let dir = a.out.prepare()?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().context("bad seed list"))
        .collect::<Result<_>>()?;
    let cfg = AblationConfig {
        steps_per_task: a.steps_per_task,
        batch_size: a.batch_size,
        lr: a.lr,
        seeds,
        eval_suite_seed: a.suite_seed,
        eval_n_per_prompt: a.n_per_prompt,
        eval_und_scenes: a.und_scenes,
        sampler: SamplerConfig { cfg_scale: a.cfg_scale, ..Default::default() },
        ..Default::default()
    };
    let out = ablate::run_ablation(&cfg)?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&out.report)?)?;
    let mut csv = fs::File::create(dir.join("ablation.csv"))?;
    ablate::write_report_csv(&out.report, &mut csv)?;
    let mut logs = String::from("variant,seed,step,stage,task,loss,lr\n");
    for t in &out.trained {
        for r in &t.log {
            let task = match r.task {
                unifork::toyworld::Task::Gen => "gen",
                unifork::toyworld::Task::Und => "und",
            };
            logs.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.kind.name(),
                t.seed,
                r.step,
                r.stage,
                task,
                r.loss,
                r.lr
            ));
        }
    }
    fs::write(dir.join("train_logs.csv"), logs)?;
    if a.save_checkpoints {
        for t in &out.trained {
            save_model(&t.model, &dir.join(format!("{}_s{}", t.kind.name(), t.seed)))?;
        }
    }
    println!("ablation written to {}", dir.display());
    Ok(())
}

/// Mixed single/two-object probe scenes, two thirds single.
fn probe_scenes(seed: u64, b: usize) -> Vec<(u64, Scene)> {
    let mut rng = keyed(seed, "probe-scenes", &[]);
    (0..b as u64)
        .map(|i| {
            let c = if i % 3 == 2 { Curriculum::TwoObject } else { Curriculum::Single };
            (i, sample_scene(&mut rng, c))
        })
        .collect()
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let dir = a.out.prepare()?;
    let model = load_model(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let metric = match a.metric.as_str() {
        "euclidean" => Metric::Euclidean,
        "cosine" => Metric::Cosine,
        other => bail!("unknown metric `{other}`"),
    };
    let tasks: Vec<ProbeTask> = match a.task.as_str() {
        "both" => vec![ProbeTask::Gen, ProbeTask::Und],
        "gen" => vec![ProbeTask::Gen],
        "und" => vec![ProbeTask::Und],
        other => bail!("unknown task `{other}`"),
    };
    let pcfg = ProbeConfig {
        k: a.k,
        metric,
        b: a.b,
        text_ref: if a.per_layer_text { TextRef::PerLayer } else { TextRef::FinalLayer },
        use_sampled_images: a.sampled_images,
    };
    let scenes = probe_scenes(a.seed, a.b);
    let grids = if a.sampled_images {
        let scfg = SamplerConfig { cfg_scale: a.cfg_scale, seed: a.seed, ..Default::default() };
        let captions: Vec<Vec<u32>> =
            scenes.iter().map(|(_, s)| caption_template(s)).collect();
        let rngs = (0..captions.len())
            .map(|i| keyed(a.seed, "probe-sampler", &[i as u64]))
            .collect();
        Some(sample_images(&model, &captions, &scfg, rngs)?)
    } else {
        None
    };
    let mut curves = Vec::new();
    let mut shapes = Vec::new();
    for task in tasks {
        let curve = alignment_curve(&model, task, &scenes, grids.as_deref(), &pcfg)?;
        let shape = curve_shape(&curve);
        shapes.push(serde_json::to_value(ShapeReport {
            task,
            b: a.b,
            k: a.k,
            metric,
            text_ref: pcfg.text_ref,
            shape,
            scores: &curve.scores,
        })?);
        curves.push(curve);
    }
    let mut csv = fs::File::create(dir.join("alignment.csv"))?;
    write_curves_csv(&curves, a.b, a.k, metric, &mut csv)?;
    fs::write(
        dir.join("alignment_shapes.json"),
        serde_json::to_string_pretty(&shapes)?,
    )?;
    println!("probe written to {}", dir.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let dir = a.out.prepare()?;
    let model = load_model(&a.checkpoint)?;
    let scfg = SamplerConfig {
        cfg_scale: a.cfg_scale,
        temperature: a.temperature,
        top_k: a.top_k,
        seed: a.seed,
    };
    let vocab = model.vocab();
    let mut rng = keyed(a.seed, "sample-prompts", &[]);
    let scenes: Vec<Scene> = (0..a.n_prompts)
        .map(|i| {
            sample_scene(&mut rng, if i % 2 == 0 { Curriculum::Single } else { Curriculum::TwoObject })
        })
        .collect();
    let mut captions = Vec::new();
    let mut rngs = Vec::new();
    for (pix, scene) in scenes.iter().enumerate() {
        for rep in 0..a.n_per_prompt {
            captions.push(caption_template(scene));
            rngs.push(keyed(a.seed, "sampler", &[pix as u64, rep as u64]));
        }
    }
    let grids = sample_images(&model, &captions, &scfg, rngs)?;
    let mut art = String::new();
    let mut records = Vec::new();
    for (pix, scene) in scenes.iter().enumerate() {
        let prompt = caption_to_string(&caption_template(scene), &vocab);
        for rep in 0..a.n_per_prompt {
            let grid = &grids[pix * a.n_per_prompt + rep];
            let parsed = parse(grid);
            let exact = parsed.as_ref() == Some(scene);
            art.push_str(&format!("prompt {pix}.{rep}: {prompt}\n"));
            art.push_str(&grid_ascii(grid));
            art.push_str(&format!(
                "parsed: {}\n\n",
                match &parsed {
                    Some(s) => format!("{} (exact: {exact})", caption_to_string(&caption_template(s), &vocab)),
                    None => "failure".into(),
                }
            ));
            records.push(serde_json::json!({
                "prompt_ix": pix,
                "replica": rep,
                "prompt": prompt,
                "scene": scene,
                "cells": grid.cells,
                "parsed": parsed,
                "exact": exact,
            }));
        }
    }
    fs::write(dir.join("samples.txt"), art)?;
    fs::write(dir.join("samples.json"), serde_json::to_string_pretty(&records)?)?;
    println!("samples written to {}", dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let dir = a.out.prepare()?;
    let model = load_model(&a.checkpoint)?;
    let scfg = SamplerConfig {
        cfg_scale: a.cfg_scale,
        temperature: a.temperature,
        top_k: 0,
        seed: a.seed,
    };
    let format = match a.und_format.as_str() {
        "pretrain" => StageFormat::Pretrain,
        "sft" => StageFormat::Sft,
        other => bail!("unknown und format `{other}`"),
    };
    let suite = default_suite(a.suite_seed);
    let gen = score_generation(&model, &suite, a.n_per_prompt, &scfg);
    let scenes = ablate::und_eval_scenes(a.suite_seed, a.und_scenes);
    let und = score_understanding(&model, &scenes, format, 24)?;
    fs::write(dir.join("gen_report.json"), serde_json::to_string_pretty(&gen)?)?;
    fs::write(dir.join("und_report.json"), serde_json::to_string_pretty(&und)?)?;
    println!(
        "eval written to {} (gen overall {:.3}, und exact {:.3})",
        dir.display(),
        gen.overall,
        und.exact
    );
    Ok(())
}

