//! Three-stage training pipeline: masked next-token losses for both tasks,
//! Adam with decoupled weight decay, per-stage freeze masks, warmup +
//! constant/cosine schedules, and the stage configuration file format.
//!
//! Stage I trains only the connector and heads, stage II everything, stage
//! III exactly one task branch with all shared components frozen. Freeze
//! masks act at optimizer level: a frozen parameter is never touched, so it
//! stays bit-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ConfigError, ModelError};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::{Grads, Graph, NodeId, ParamStore};
use crate::model::{Branch, ForkedTransformer, ModelConfig};
use crate::rng::{keyed, substream};
use crate::tensor::Tensor;
use crate::toyworld::{
    build_sample, rvq_encode, sample_scene, Curriculum, SeqToken, SequenceSample, StageFormat,
    Task,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

// ── Stages ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    I,
    IIPretrain,
    IISft,
    IIIGen,
    IIIUnd,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::I,
        StageKind::IIPretrain,
        StageKind::IISft,
        StageKind::IIIGen,
        StageKind::IIIUnd,
    ];

    pub fn section(self) -> &'static str {
        match self {
            StageKind::I => "stage1",
            StageKind::IIPretrain => "stage2_pretrain",
            StageKind::IISft => "stage2_sft",
            StageKind::IIIGen => "stage3_gen",
            StageKind::IIIUnd => "stage3_und",
        }
    }

    /// Freeze mask: which parameters this stage updates.
    pub fn trainable(self, name: &str) -> bool {
        match self {
            // Backbone frozen; only the connector and the output heads learn.
            StageKind::I => name.starts_with("shared.connector.") || name.starts_with("heads."),
            StageKind::IIPretrain | StageKind::IISft => true,
            // One branch plus its head; every shared component stays frozen.
            StageKind::IIIGen => name.starts_with("gen.") || name.starts_with("heads.vision."),
            StageKind::IIIUnd => name.starts_with("und.") || name.starts_with("heads.text."),
        }
    }

    /// (generation fraction, understanding fraction) of training batches.
    pub fn data_mix(self) -> (f64, f64) {
        match self {
            StageKind::I | StageKind::IIPretrain | StageKind::IISft => (0.5, 0.5),
            StageKind::IIIGen => (1.0, 0.0),
            StageKind::IIIUnd => (0.0, 1.0),
        }
    }

    pub fn und_format(self) -> StageFormat {
        match self {
            StageKind::I | StageKind::IIPretrain => StageFormat::Pretrain,
            _ => StageFormat::Sft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug)]
pub struct StagePlan {
    pub kind: StageKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub data_mix: (f64, f64),
    pub p_cfg: f64,
    pub grad_clip: f64,
    pub context_length: usize,
    pub precision: String,
}

/// Learning rate at a 1-based step: linear warmup to `lr` over
/// `round(warmup_fraction * steps)` steps, then constant or a half-cosine
/// decay to zero.
pub fn lr_at(plan: &StagePlan, step: usize) -> f64 {
    let w = (plan.warmup_fraction * plan.steps as f64).round() as usize;
    if w > 0 && step <= w {
        return plan.lr * step as f64 / w as f64;
    }
    match plan.schedule {
        LrSchedule::Constant => plan.lr,
        LrSchedule::Cosine => {
            if plan.steps <= w {
                return plan.lr;
            }
            let progress = (step - w) as f64 / (plan.steps - w) as f64;
            plan.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

// ── Stage config file ────────────────────────────────────────────────

/// One parsed `[stageX]` section; carries the full schema even where desk
/// runs override steps and batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct RawStageConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub optimizer: String,
    pub context_length: usize,
    pub precision: String,
}

/// Parse the flat key-value stage file. All five stages must be present;
/// unknown keys or stages are errors.
pub fn load_stage_configs(text: &str) -> Result<Vec<(StageKind, RawStageConfig)>, ConfigError> {
    struct Partial {
        kind: StageKind,
        fields: std::collections::HashMap<String, String>,
    }
    let mut sections: Vec<Partial> = Vec::new();
    for (ix, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let kind = StageKind::ALL
                .iter()
                .copied()
                .find(|k| k.section() == name)
                .ok_or_else(|| ConfigError::Parse {
                    line: ix + 1,
                    msg: format!("unknown stage section [{name}]"),
                })?;
            sections.push(Partial { kind, fields: Default::default() });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: ix + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let section = sections.last_mut().ok_or_else(|| ConfigError::Parse {
            line: ix + 1,
            msg: "key before any [stage] section".into(),
        })?;
        section.fields.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut out = Vec::new();
    for kind in StageKind::ALL {
        let sec = sections
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| ConfigError::MissingStage(kind.section().into()))?;
        const KEYS: [&str; 9] = [
            "lr",
            "schedule",
            "warmup_fraction",
            "steps",
            "batch_size",
            "weight_decay",
            "optimizer",
            "context_length",
            "precision",
        ];
        for key in sec.fields.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let get = |key: &str| -> Result<&str, ConfigError> {
            sec.fields.get(key).map(String::as_str).ok_or_else(|| ConfigError::MissingKey {
                stage: kind.section().into(),
                key: key.into(),
            })
        };
        let parse_f64 = |key: &str| -> Result<f64, ConfigError> {
            get(key)?.parse().map_err(|_| ConfigError::Parse {
                line: 0,
                msg: format!("{}: bad float `{}`", key, sec.fields[key]),
            })
        };
        let parse_usize = |key: &str| -> Result<usize, ConfigError> {
            get(key)?.parse().map_err(|_| ConfigError::Parse {
                line: 0,
                msg: format!("{}: bad integer `{}`", key, sec.fields[key]),
            })
        };
        let schedule = match get("schedule")? {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            other => {
                return Err(ConfigError::Parse {
                    line: 0,
                    msg: format!("unknown schedule `{other}`"),
                })
            }
        };
        let optimizer = get("optimizer")?.to_string();
        if optimizer != "adamw" {
            return Err(ConfigError::Parse {
                line: 0,
                msg: format!("unknown optimizer `{optimizer}`"),
            });
        }
        out.push((
            kind,
            RawStageConfig {
                lr: parse_f64("lr")?,
                schedule,
                warmup_fraction: parse_f64("warmup_fraction")?,
                steps: parse_usize("steps")?,
                batch_size: parse_usize("batch_size")?,
                weight_decay: parse_f64("weight_decay")?,
                optimizer,
                context_length: parse_usize("context_length")?,
                precision: get("precision")?.to_string(),
            },
        ));
    }
    Ok(out)
}

pub fn load_stage_file(path: &std::path::Path) -> Result<Vec<StagePlan>, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let raws = load_stage_configs(&text)?;
    Ok(raws.into_iter().map(|(kind, raw)| plan_from_raw(kind, &raw)).collect())
}

pub fn plan_from_raw(kind: StageKind, raw: &RawStageConfig) -> StagePlan {
    StagePlan {
        kind,
        lr: raw.lr,
        schedule: raw.schedule,
        warmup_fraction: raw.warmup_fraction,
        steps: raw.steps,
        batch_size: raw.batch_size,
        weight_decay: raw.weight_decay,
        data_mix: kind.data_mix(),
        p_cfg: 0.1,
        grad_clip: 1.0,
        context_length: raw.context_length,
        precision: raw.precision.clone(),
    }
}

// ── Losses ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct TaskLosses {
    pub total: f64,
    pub gen: Option<f64>,
    pub und: Option<f64>,
    pub n_gen: usize,
    pub n_und: usize,
}

fn combine_losses(per_sample: &[(Task, f64)]) -> TaskLosses {
    let mut gen_sum = 0.0;
    let mut und_sum = 0.0;
    let (mut n_gen, mut n_und) = (0usize, 0usize);
    for &(task, loss) in per_sample {
        match task {
            Task::Gen => {
                gen_sum += loss;
                n_gen += 1;
            }
            Task::Und => {
                und_sum += loss;
                n_und += 1;
            }
        }
    }
    let n = per_sample.len() as f64;
    TaskLosses {
        total: (gen_sum + und_sum) / n,
        gen: (n_gen > 0).then(|| gen_sum / n_gen as f64),
        und: (n_und > 0).then(|| und_sum / n_und as f64),
        n_gen,
        n_und,
    }
}

/// Generation loss: teacher-forced residual-code cross-entropy. The code
/// logits for the cell at position p come from the feature at p−1; masking
/// follows the sample's loss mask, expanded across the D codes per cell.
pub fn gen_loss_graph(
    model: &ForkedTransformer,
    g: &mut Graph,
    sample: &SequenceSample,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ModelError> {
    debug_assert_eq!(sample.task, Task::Gen);
    let (_, final_norm) =
        model.forward_features(g, &sample.tokens, &[sample.tokens.len()], Branch::Gen, dropout)?;
    let d = model.cfg.rvq_depth;
    let base = model.cfg.image_codebook as u32;
    let mut predictors = Vec::new();
    let mut codes = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (pos, tok) in sample.tokens.iter().enumerate() {
        if let SeqToken::Cell(sym) = *tok {
            assert!(pos > 0, "an image cell cannot be the first token");
            predictors.push(pos - 1);
            let cell_codes =
                rvq_encode(sym, d, base).map_err(|_| ModelError::UnknownId { id: sym, pos })?;
            for &c in &cell_codes {
                targets.push(c as usize);
                mask.push(sample.loss_mask[pos]);
            }
            codes.push(cell_codes);
        }
    }
    let sel = g.select_rows(final_norm, &predictors);
    let logits = model.rvq_head_forward(g, sel, &codes)?;
    Ok(g.cross_entropy(logits, &targets, &mask)?)
}

/// Understanding loss: next-token cross-entropy from the text head, masked
/// to the response span. Targets exist for every position; masked-out rows
/// contribute exactly nothing.
pub fn und_loss_graph(
    model: &ForkedTransformer,
    g: &mut Graph,
    sample: &SequenceSample,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ModelError> {
    debug_assert_eq!(sample.task, Task::Und);
    let len = sample.tokens.len();
    let (_, final_norm) =
        model.forward_features(g, &sample.tokens, &[len], Branch::Und, dropout)?;
    let rows: Vec<usize> = (0..len - 1).collect();
    let sel = g.select_rows(final_norm, &rows);
    let logits = model.text_logits(g, sel);
    let mut targets = Vec::with_capacity(len - 1);
    let mut mask = Vec::with_capacity(len - 1);
    for next in 1..len {
        let (t, m) = match sample.tokens[next] {
            SeqToken::Tok(id) => (id as usize, sample.loss_mask[next]),
            SeqToken::Cell(_) => {
                debug_assert!(!sample.loss_mask[next], "understanding mask cannot cover cells");
                (0, false)
            }
        };
        targets.push(t);
        mask.push(m);
    }
    Ok(g.cross_entropy(logits, &targets, &mask)?)
}

pub fn sample_loss_graph(
    model: &ForkedTransformer,
    g: &mut Graph,
    sample: &SequenceSample,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ModelError> {
    match sample.task {
        Task::Gen => gen_loss_graph(model, g, sample, dropout),
        Task::Und => und_loss_graph(model, g, sample, dropout),
    }
}

/// Mean masked cross-entropy of a batch, split by task. No task weighting:
/// the total is the plain sample mean.
pub fn step_loss(
    model: &ForkedTransformer,
    batch: &[SequenceSample],
) -> Result<TaskLosses, ModelError> {
    assert!(!batch.is_empty(), "empty batch");
    let per: Result<Vec<(Task, f64)>, ModelError> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::inference(&model.params);
            let loss = sample_loss_graph(model, &mut g, s, None)?;
            Ok((s.task, g.value(loss).item()))
        })
        .collect();
    Ok(combine_losses(&per?))
}

/// Forward + backward over a batch; gradients are averaged in sample order
/// (bit-reproducible regardless of thread scheduling).
pub fn step_grads(
    model: &ForkedTransformer,
    batch: &[SequenceSample],
    dropout_key: Option<(u64, u64)>,
) -> Result<(TaskLosses, Grads), ModelError> {
    assert!(!batch.is_empty(), "empty batch");
    let results: Result<Vec<(Task, f64, Grads)>, ModelError> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = Graph::new(&model.params);
            let mut rng = dropout_key
                .map(|(seed, step)| keyed(seed, "dropout", &[step, i as u64]));
            let loss = sample_loss_graph(model, &mut g, s, rng.as_mut())?;
            let grads = g.backward(loss)?;
            Ok((s.task, g.value(loss).item(), grads))
        })
        .collect();
    let results = results?;
    let mut grads = Grads::zeros(&model.params);
    for (_, _, g) in &results {
        grads.add_assign(g);
    }
    grads.scale(1.0 / batch.len() as f64);
    let per: Vec<(Task, f64)> = results.iter().map(|&(t, l, _)| (t, l)).collect();
    Ok((combine_losses(&per), grads))
}

// ── Optimizer ────────────────────────────────────────────────────────

/// First/second moment buffers aligned with the parameter store.
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { m, v, t: 0 }
    }
}

/// One AdamW step. Frozen parameters are skipped entirely — no moment
/// update, no decay — so they stay bit-identical.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    trainable: &[bool],
) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let n = params.len();
    for ix in 0..n {
        if !trainable[ix] {
            continue;
        }
        let Some(g) = grads.get(crate::graph::ParamId(ix)) else { continue };
        let g = g.data().to_vec();
        let m = state.m[ix].data_mut();
        let v = state.v[ix].data_mut();
        let p = params.tensor_mut(crate::graph::ParamId(ix)).data_mut();
        for (((pj, &gj), mj), vj) in p.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *pj -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *pj);
        }
    }
}

fn trainable_mask(model: &ForkedTransformer, kind: StageKind) -> Vec<bool> {
    model.params.names().map(|n| kind.trainable(n)).collect()
}

/// Scale gradients so their global norm over trainable parameters is at
/// most `clip`.
fn clip_gradients(grads: &mut Grads, params: &ParamStore, trainable: &[bool], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut acc = 0.0;
    for ix in 0..params.len() {
        if !trainable[ix] {
            continue;
        }
        if let Some(g) = grads.get(crate::graph::ParamId(ix)) {
            for v in g.data() {
                acc += v * v;
            }
        }
    }
    let norm = acc.sqrt();
    if norm > clip {
        grads.scale(clip / norm);
    }
}

// ── Batch sources ────────────────────────────────────────────────────

pub trait BatchSource {
    fn next_batch(
        &mut self,
        task: Task,
        n: usize,
        format: StageFormat,
        p_cfg: f64,
    ) -> Vec<SequenceSample>;
}

/// Infinite procedural stream. Each task draws from its own named
/// substream, so consumers that use only one task still see the exact same
/// per-task sequence of samples.
pub struct ProceduralSource {
    rng_gen: ChaCha8Rng,
    rng_und: ChaCha8Rng,
    pub two_object_frac: f64,
    vocab: crate::vocab::VocabLayout,
}

impl ProceduralSource {
    pub fn new(seed: u64, cfg: &ModelConfig) -> Self {
        ProceduralSource {
            rng_gen: substream(seed, "data-gen"),
            rng_und: substream(seed, "data-und"),
            two_object_frac: 0.5,
            vocab: cfg.vocab(),
        }
    }
}

impl BatchSource for ProceduralSource {
    fn next_batch(
        &mut self,
        task: Task,
        n: usize,
        format: StageFormat,
        p_cfg: f64,
    ) -> Vec<SequenceSample> {
        let rng = match task {
            Task::Gen => &mut self.rng_gen,
            Task::Und => &mut self.rng_und,
        };
        let two_frac = self.two_object_frac;
        (0..n)
            .map(|_| {
                let curriculum = if rng.gen_bool(two_frac) {
                    Curriculum::TwoObject
                } else {
                    Curriculum::Single
                };
                let scene = sample_scene(rng, curriculum);
                build_sample(&scene, task, format, p_cfg, &self.vocab, rng)
            })
            .collect()
    }
}

/// Cycles through fixed per-task datasets (overfit experiments).
pub struct FixedSource {
    pub gen: Vec<SequenceSample>,
    pub und: Vec<SequenceSample>,
    cursor_gen: usize,
    cursor_und: usize,
}

impl FixedSource {
    pub fn new(gen: Vec<SequenceSample>, und: Vec<SequenceSample>) -> Self {
        FixedSource { gen, und, cursor_gen: 0, cursor_und: 0 }
    }
}

impl BatchSource for FixedSource {
    fn next_batch(
        &mut self,
        task: Task,
        n: usize,
        _format: StageFormat,
        _p_cfg: f64,
    ) -> Vec<SequenceSample> {
        let (pool, cursor) = match task {
            Task::Gen => (&self.gen, &mut self.cursor_gen),
            Task::Und => (&self.und, &mut self.cursor_und),
        };
        assert!(!pool.is_empty(), "no samples for {task:?}");
        (0..n)
            .map(|_| {
                let s = pool[*cursor % pool.len()].clone();
                *cursor += 1;
                s
            })
            .collect()
    }
}

// ── Stage execution ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: u64,
    pub stage: &'static str,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "step,stage,task,loss,lr")?;
    for r in rows {
        let task = match r.task {
            Task::Gen => "gen",
            Task::Und => "und",
        };
        writeln!(w, "{},{},{},{},{}", r.step, r.stage, task, r.loss, r.lr)?;
    }
    Ok(())
}

/// Deterministic task interleaving honoring the stage's data mix: at every
/// step the task with the larger quota deficit runs (generation on ties).
fn task_for_step(step: usize, mix: (f64, f64), n_gen_done: usize) -> Task {
    let want_gen = (step + 1) as f64 * mix.0 / (mix.0 + mix.1);
    if (n_gen_done as f64) < want_gen - 1e-9 || mix.1 == 0.0 {
        Task::Gen
    } else {
        Task::Und
    }
}

/// Run one stage: `plan.steps` optimizer steps over batches from `src`.
/// Parameters outside the stage's freeze mask are bit-identical afterwards.
/// Returns appended log rows; `step0` is the global step offset.
pub fn apply_stage(
    model: &mut ForkedTransformer,
    plan: &StagePlan,
    src: &mut dyn BatchSource,
    step0: u64,
    dropout_seed: u64,
    log: &mut Vec<LogRow>,
) -> Result<(), ModelError> {
    let trainable = trainable_mask(model, plan.kind);
    let mut adam = AdamState::new(&model.params);
    let mut n_gen_done = 0usize;
    for step in 0..plan.steps {
        let task = task_for_step(step, plan.data_mix, n_gen_done);
        if task == Task::Gen {
            n_gen_done += 1;
        }
        let p_cfg = if task == Task::Gen { plan.p_cfg } else { 0.0 };
        let batch = src.next_batch(task, plan.batch_size, plan.kind.und_format(), p_cfg);
        let (losses, mut grads) =
            step_grads(model, &batch, Some((dropout_seed, step0 + step as u64)))?;
        clip_gradients(&mut grads, &model.params, &trainable, plan.grad_clip);
        let lr = lr_at(plan, step + 1);
        adam_step(&mut model.params, &grads, &mut adam, lr, plan.weight_decay, &trainable);
        log.push(LogRow {
            step: step0 + step as u64 + 1,
            stage: plan.kind.section(),
            task,
            loss: losses.total,
            lr,
        });
    }
    Ok(())
}

// ── Whole-model gradient check ───────────────────────────────────────

/// Finite-difference check of every parameter tensor against the combined
/// generation + understanding loss on one fixed two-object scene.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    seed: u64,
    budget: usize,
    tol: f64,
) -> Result<GradCheckReport, ModelError> {
    let model = ForkedTransformer::new(cfg.clone(), &mut substream(seed, "init"))?;
    let vocab = cfg.vocab();
    let mut rng = substream(seed, "gradcheck-data");
    let scene = sample_scene(&mut rng, Curriculum::TwoObject);
    let gen = build_sample(&scene, Task::Gen, StageFormat::Pretrain, 0.0, &vocab, &mut rng);
    let und = build_sample(&scene, Task::Und, StageFormat::Sft, 0.0, &vocab, &mut rng);

    let build = |params: &ParamStore, track: bool| -> Result<(f64, Option<Grads>), ModelError> {
        let stub = ForkedTransformer { cfg: cfg.clone(), params: params.clone() };
        let mut g = if track { Graph::new(&stub.params) } else { Graph::inference(&stub.params) };
        let lg = gen_loss_graph(&stub, &mut g, &gen, None)?;
        let lu = und_loss_graph(&stub, &mut g, &und, None)?;
        let total = g.add(lg, lu);
        let loss = g.value(total).item();
        let grads = if track { Some(g.backward(total)?) } else { None };
        Ok((loss, grads))
    };

    let (_, grads) = build(&model.params, true)?;
    let grads = grads.expect("tracked");
    let report = finite_diff_check(
        &model.params,
        &grads,
        |p| build(p, false).expect("loss evaluates").0,
        budget,
        256,
        1e-5,
        tol,
    );
    Ok(report)
}
