//! Four-variant architecture ablation: task experts, a fully shared
//! backbone, and the forked model, trained on identical per-task data
//! streams with matched active parameters, then scored with the exact
//! evaluation suites.
//!
//! All four variants start from the same randomly initialized trunk (the
//! fork duplicates its upper layers), and per-task data streams are seeded
//! independently of the variant, so the comparison isolates topology.

use serde::Serialize;

use crate::error::ModelError;
use crate::model::{Branch, ForkedTransformer, ModelConfig};
use crate::rng::substream;
use crate::sample::{
    default_suite, score_generation, score_understanding, GenReport, SamplerConfig, UndReport,
};
use crate::toyworld::{sample_scene, Curriculum, Scene, StageFormat, Task};
use crate::train::{
    BatchSource,
    apply_stage, step_loss, LogRow, LrSchedule, ProceduralSource, StageKind, StagePlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VariantKind {
    GenExpert,
    UndExpert,
    FullyShared,
    UniFork,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::GenExpert,
        VariantKind::UndExpert,
        VariantKind::FullyShared,
        VariantKind::UniFork,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::GenExpert => "gen_expert",
            VariantKind::UndExpert => "und_expert",
            VariantKind::FullyShared => "fully_shared",
            VariantKind::UniFork => "unifork",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn trains_gen(self) -> bool {
        !matches!(self, VariantKind::UndExpert)
    }

    pub fn trains_und(self) -> bool {
        !matches!(self, VariantKind::GenExpert)
    }

    fn data_mix(self) -> (f64, f64) {
        match (self.trains_gen(), self.trains_und()) {
            (true, true) => (0.5, 0.5),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => unreachable!(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Forked topology; expert and fully shared variants flatten it to
    /// M+N shared layers.
    pub base: ModelConfig,
    /// Optimizer steps each trained task receives (unified variants run
    /// twice this many steps, alternating tasks).
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_cfg: f64,
    pub two_object_frac: f64,
    pub seeds: Vec<u64>,
    pub eval_suite_seed: u64,
    pub eval_n_per_prompt: usize,
    pub eval_und_scenes: usize,
    pub sampler: SamplerConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base: ModelConfig::toy_default(),
            steps_per_task: 2500,
            batch_size: 4,
            lr: 1e-3,
            p_cfg: 0.1,
            two_object_frac: 0.5,
            seeds: vec![1, 2, 3],
            eval_suite_seed: 7,
            eval_n_per_prompt: 2,
            eval_und_scenes: 48,
            sampler: SamplerConfig { cfg_scale: 2.0, temperature: 1.0, top_k: 0, seed: 0 },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub und: Option<UndReport>,
    pub gen: Option<GenReport>,
    pub final_gen_loss: Option<f64>,
    pub final_und_loss: Option<f64>,
    pub active_params_und: usize,
    pub active_params_gen: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub struct TrainedVariant {
    pub kind: VariantKind,
    pub seed: u64,
    pub model: ForkedTransformer,
    pub log: Vec<LogRow>,
}

/// All variants grow from one trunk per seed: the fork duplicates the
/// trunk's upper half, everything else uses the trunk as-is.
pub fn build_variant(
    kind: VariantKind,
    base: &ModelConfig,
    seed: u64,
) -> Result<ForkedTransformer, ModelError> {
    let trunk_cfg = ModelConfig {
        m_shared: base.m_shared + base.n_branch,
        n_branch: 0,
        ..base.clone()
    };
    let trunk = ForkedTransformer::new(trunk_cfg, &mut substream(seed, "init"))?;
    match kind {
        VariantKind::UniFork => {
            ForkedTransformer::init_fork_from_trunk(&trunk, base.m_shared, base.n_branch)
        }
        _ => Ok(trunk),
    }
}

fn training_plan(kind: VariantKind, cfg: &AblationConfig) -> StagePlan {
    let tasks = kind.trains_gen() as usize + kind.trains_und() as usize;
    StagePlan {
        kind: StageKind::IIPretrain,
        lr: cfg.lr,
        schedule: LrSchedule::Cosine,
        warmup_fraction: 0.03,
        steps: cfg.steps_per_task * tasks,
        batch_size: cfg.batch_size,
        weight_decay: 0.0,
        data_mix: kind.data_mix(),
        p_cfg: cfg.p_cfg,
        grad_clip: 1.0,
        context_length: cfg.base.max_seq_len,
        precision: "f64".into(),
    }
}

pub fn train_variant(
    kind: VariantKind,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<TrainedVariant, ModelError> {
    let mut model = build_variant(kind, &cfg.base, seed)?;
    let plan = training_plan(kind, cfg);
    let mut src = ProceduralSource::new(seed, &cfg.base);
    src.two_object_frac = cfg.two_object_frac;
    let mut log = Vec::new();
    apply_stage(&mut model, &plan, &mut src, 0, seed, &mut log)?;
    Ok(TrainedVariant { kind, seed, model, log })
}

/// Deterministic held-out scenes for caption evaluation.
pub fn und_eval_scenes(seed: u64, n: usize) -> Vec<Scene> {
    let mut rng = crate::rng::keyed(seed, "und-eval", &[]);
    (0..n)
        .map(|i| {
            let c = if i % 3 == 2 { Curriculum::TwoObject } else { Curriculum::Single };
            sample_scene(&mut rng, c)
        })
        .collect()
}

/// Post-training loss on a fixed probe batch (CFG dropout disabled).
fn final_losses(
    model: &ForkedTransformer,
    kind: VariantKind,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<(Option<f64>, Option<f64>), ModelError> {
    let mut src = ProceduralSource::new(seed ^ 0x5eed_e7a1, &cfg.base);
    src.two_object_frac = cfg.two_object_frac;
    let mut gen_loss = None;
    let mut und_loss = None;
    if kind.trains_gen() {
        let batch = src.next_batch(Task::Gen, 32, StageFormat::Pretrain, 0.0);
        gen_loss = step_loss(model, &batch)?.gen;
    }
    if kind.trains_und() {
        let batch = src.next_batch(Task::Und, 32, StageFormat::Pretrain, 0.0);
        und_loss = step_loss(model, &batch)?.und;
    }
    Ok((gen_loss, und_loss))
}

pub fn evaluate_variant(
    trained: &TrainedVariant,
    cfg: &AblationConfig,
) -> Result<AblationRow, ModelError> {
    let kind = trained.kind;
    let model = &trained.model;
    let gen = kind.trains_gen().then(|| {
        let suite = default_suite(cfg.eval_suite_seed);
        let scfg = SamplerConfig {
            seed: cfg.sampler.seed ^ trained.seed,
            ..cfg.sampler.clone()
        };
        score_generation(model, &suite, cfg.eval_n_per_prompt, &scfg)
    });
    let und = if kind.trains_und() {
        let scenes = und_eval_scenes(cfg.eval_suite_seed, cfg.eval_und_scenes);
        Some(score_understanding(model, &scenes, StageFormat::Pretrain, 24)?)
    } else {
        None
    };
    let (final_gen_loss, final_und_loss) = final_losses(model, kind, cfg, trained.seed)?;
    Ok(AblationRow {
        variant: kind.name(),
        seed: trained.seed,
        und,
        gen,
        final_gen_loss,
        final_und_loss,
        active_params_und: model.active_param_count(Branch::Und),
        active_params_gen: model.active_param_count(Branch::Gen),
        total_params: model.total_param_count(),
    })
}

pub struct AblationOutput {
    pub report: AblationReport,
    pub trained: Vec<TrainedVariant>,
}

/// Train and evaluate every variant for every seed. Variants see identical
/// per-task sample streams (streams are keyed by seed and task only).
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationOutput, ModelError> {
    let mut rows = Vec::new();
    let mut trained_all = Vec::new();
    for kind in VariantKind::ALL {
        for &seed in &cfg.seeds {
            let trained = train_variant(kind, cfg, seed)?;
            rows.push(evaluate_variant(&trained, cfg)?);
            trained_all.push(trained);
        }
    }
    // Matched active-parameter budget across variants, per task.
    for task in [Branch::Und, Branch::Gen] {
        let counts: Vec<f64> = trained_all
            .iter()
            .map(|t| t.model.active_param_count(task) as f64)
            .collect();
        let max = counts.iter().cloned().fold(0.0, f64::max);
        let min = counts.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            max / min <= 1.05,
            "active-parameter budgets diverge: {min} vs {max}"
        );
    }
    Ok(AblationOutput { report: AblationReport { rows }, trained: trained_all })
}

/// Per-seed rows plus per-variant means, in the ablation table's layout.
pub fn write_report_csv<W: std::io::Write>(
    report: &AblationReport,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "model,seed,und_exact,und_shape,und_color,und_position,gen_single_object,\
         gen_two_objects,gen_colors,gen_position,gen_color_attri,gen_overall,\
         final_gen_loss,final_und_loss"
    )?;
    let fmt_opt = |v: Option<f64>| v.map_or(String::from("-"), |x| format!("{x:.4}"));
    let mut write_row = |model: &str, seed: &str, rows: &[&AblationRow]| -> std::io::Result<()> {
        let mean = |get: &dyn Fn(&AblationRow) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            model,
            seed,
            fmt_opt(mean(&|r| r.und.as_ref().map(|u| u.exact))),
            fmt_opt(mean(&|r| r.und.as_ref().map(|u| u.shape))),
            fmt_opt(mean(&|r| r.und.as_ref().map(|u| u.color))),
            fmt_opt(mean(&|r| r.und.as_ref().map(|u| u.position))),
            fmt_opt(mean(&|r| r.gen.as_ref().map(|g| g.single_object))),
            fmt_opt(mean(&|r| r.gen.as_ref().map(|g| g.two_objects))),
            fmt_opt(mean(&|r| r.gen.as_ref().map(|g| g.colors))),
            fmt_opt(mean(&|r| r.gen.as_ref().map(|g| g.position))),
            fmt_opt(mean(&|r| r.gen.as_ref().map(|g| g.color_attri))),
            fmt_opt(mean(&|r| r.gen.as_ref().map(|g| g.overall))),
            fmt_opt(mean(&|r| r.final_gen_loss)),
            fmt_opt(mean(&|r| r.final_und_loss)),
        )
    };
    for kind in VariantKind::ALL {
        let rows: Vec<&AblationRow> =
            report.rows.iter().filter(|r| r.variant == kind.name()).collect();
        for row in &rows {
            write_row(kind.name(), &row.seed.to_string(), &[row])?;
        }
        if rows.len() > 1 {
            write_row(kind.name(), "mean", &rows)?;
        }
    }
    Ok(())
}
