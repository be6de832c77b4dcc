//! The Y-shaped backbone: M shared decoder blocks feeding two structurally
//! identical, parameter-disjoint N-block branches, with a text head usable
//! from either branch and a residual-code vision head on the generation
//! side. Image cells enter through a two-layer MLP connector over their
//! concatenated code embeddings; every block output is captured so probes
//! can read per-layer states.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::graph::{Graph, NodeId, ParamStore};
use crate::tensor::Tensor;
use crate::toyworld::{rvq_encode, SeqToken, WORDS};
use crate::vocab::VocabLayout;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Und,
    Gen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Shared layer count M.
    pub m_shared: usize,
    /// Per-branch layer count N.
    pub n_branch: usize,
    pub text_vocab: usize,
    /// Codebook size per residual level.
    pub image_codebook: usize,
    /// Codes per image position D.
    pub rvq_depth: usize,
    pub grid_side: usize,
    pub max_seq_len: usize,
    pub dropout_prob: f64,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes yet deep enough for layer-wise
    /// curve analysis.
    pub fn toy_default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            m_shared: 4,
            n_branch: 2,
            text_vocab: 80,
            image_codebook: 64,
            rvq_depth: 2,
            grid_side: 8,
            max_seq_len: 128,
            dropout_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m_shared + self.n_branch == 0 {
            return Err(ModelError::Config("M + N must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rvq_depth == 0 {
            return Err(ModelError::Config("rvq_depth must be at least 1".into()));
        }
        if self.image_codebook < 2 {
            return Err(ModelError::Config("image_codebook must be at least 2".into()));
        }
        if self.text_vocab < WORDS.len() {
            return Err(ModelError::Config(format!(
                "text_vocab {} smaller than caption vocabulary {}",
                self.text_vocab,
                WORDS.len()
            )));
        }
        if self.grid_side == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Config("grid_side and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabLayout {
        VocabLayout { text_vocab: self.text_vocab, image_codebook: self.image_codebook }
    }

    pub fn total_layers(&self) -> usize {
        self.m_shared + self.n_branch
    }

    pub fn n_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Number of distinct cell symbols the codec can carry.
    pub fn symbol_span(&self) -> u64 {
        (self.image_codebook as u64).pow(self.rvq_depth as u32)
    }
}

// ── Parameter layout ─────────────────────────────────────────────────

#[derive(Clone, Copy)]
enum Init {
    Gauss(f64),
    Zeros,
    Ones,
}

fn block_specs(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize, out_std: f64) {
    let mut p = |suffix: &str, shape: Vec<usize>, init: Init| {
        out.push((format!("{prefix}.{suffix}"), shape, init));
    };
    p("ln1.g", vec![c], Init::Ones);
    p("ln1.b", vec![c], Init::Zeros);
    for w in ["wq", "wk", "wv"] {
        p(&format!("attn.{w}"), vec![c, c], Init::Gauss(0.02));
        p(&format!("attn.b{}", &w[1..]), vec![c], Init::Zeros);
    }
    p("attn.wo", vec![c, c], Init::Gauss(out_std));
    p("attn.bo", vec![c], Init::Zeros);
    p("ln2.g", vec![c], Init::Ones);
    p("ln2.b", vec![c], Init::Zeros);
    p("mlp.fc1.w", vec![c, 4 * c], Init::Gauss(0.02));
    p("mlp.fc1.b", vec![4 * c], Init::Zeros);
    p("mlp.fc2.w", vec![4 * c, c], Init::Gauss(out_std));
    p("mlp.fc2.b", vec![c], Init::Zeros);
}

/// Canonical parameter list. Both the random constructor and the
/// fork-from-trunk constructor walk this, so insertion order (and hence
/// checkpoint layout) is identical for all construction paths.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.d_model;
    let v = cfg.vocab();
    let out_std = 0.02 / (2.0 * cfg.total_layers() as f64).sqrt();
    let mut specs = Vec::new();
    specs.push(("shared.tok_emb".into(), vec![v.total(), c], Init::Gauss(0.02)));
    specs.push(("shared.pos_emb".into(), vec![cfg.max_seq_len, c], Init::Gauss(0.02)));
    specs.push(("shared.connector.fc1.w".into(), vec![cfg.rvq_depth * c, c], Init::Gauss(0.02)));
    specs.push(("shared.connector.fc1.b".into(), vec![c], Init::Zeros));
    specs.push(("shared.connector.fc2.w".into(), vec![c, c], Init::Gauss(out_std)));
    specs.push(("shared.connector.fc2.b".into(), vec![c], Init::Zeros));
    for i in 0..cfg.m_shared {
        block_specs(&mut specs, &format!("shared.block{i}"), c, out_std);
    }
    for j in 0..cfg.n_branch {
        block_specs(&mut specs, &format!("und.block{j}"), c, out_std);
    }
    for j in 0..cfg.n_branch {
        block_specs(&mut specs, &format!("gen.block{j}"), c, out_std);
    }
    if cfg.n_branch == 0 {
        specs.push(("shared.final_norm.g".into(), vec![c], Init::Ones));
        specs.push(("shared.final_norm.b".into(), vec![c], Init::Zeros));
    } else {
        specs.push(("und.final_norm.g".into(), vec![c], Init::Ones));
        specs.push(("und.final_norm.b".into(), vec![c], Init::Zeros));
        specs.push(("gen.final_norm.g".into(), vec![c], Init::Ones));
        specs.push(("gen.final_norm.b".into(), vec![c], Init::Zeros));
    }
    specs.push(("heads.text.w".into(), vec![c, v.text_head_dim()], Init::Gauss(0.02)));
    specs.push(("heads.text.b".into(), vec![v.text_head_dim()], Init::Zeros));
    specs.push(("heads.vision.code_emb".into(), vec![cfg.image_codebook, c], Init::Gauss(0.02)));
    specs.push(("heads.vision.depth_pos".into(), vec![cfg.rvq_depth, c], Init::Gauss(0.02)));
    if cfg.rvq_depth >= 2 {
        block_specs(&mut specs, "heads.vision.block0", c, out_std);
        specs.push(("heads.vision.norm.g".into(), vec![c], Init::Ones));
        specs.push(("heads.vision.norm.b".into(), vec![c], Init::Zeros));
    }
    specs.push(("heads.vision.out.w".into(), vec![c, cfg.image_codebook], Init::Gauss(0.02)));
    specs.push(("heads.vision.out.b".into(), vec![cfg.image_codebook], Init::Zeros));
    specs
}

// ── Model ────────────────────────────────────────────────────────────

pub struct ForkedTransformer {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Node handles from one forward pass; `hidden` holds the M+N post-block
/// states, `final_norm` the branch-normalized output, `logits` the text
/// head applied to it.
pub struct GraphTrace {
    pub hidden: Vec<NodeId>,
    pub final_norm: NodeId,
    pub logits: NodeId,
}

/// Extracted (value-only) forward trace for probing.
pub struct ForwardTrace {
    pub hidden_states: Vec<Tensor>,
    pub final_hidden: Tensor,
    pub logits: Tensor,
}

impl ForkedTransformer {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&cfg) {
            let t = match init {
                Init::Gauss(std) => Tensor::randn(shape, std, rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, 1.0),
            };
            params.insert(&name, t);
        }
        Ok(ForkedTransformer { cfg, params })
    }

    /// Split an (M+N)-layer fully shared trunk into an M/N fork. Layers
    /// 0..M stay shared; layers M..M+N are duplicated into both branches
    /// with independent storage. Heads, embeddings and connector carry over.
    pub fn init_fork_from_trunk(
        trunk: &ForkedTransformer,
        m: usize,
        n: usize,
    ) -> Result<Self, ModelError> {
        if trunk.cfg.n_branch != 0 || trunk.cfg.m_shared != m + n {
            return Err(ModelError::DepthMismatch {
                trunk: trunk.cfg.total_layers(),
                want: m + n,
            });
        }
        let cfg = ModelConfig { m_shared: m, n_branch: n, ..trunk.cfg.clone() };
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, _) in param_specs(&cfg) {
            let src = fork_source_name(&name, m);
            let t = trunk.params.get(&src).clone();
            assert_eq!(t.shape(), &shape[..]);
            params.insert(&name, t);
        }
        Ok(ForkedTransformer { cfg, params })
    }

    pub fn vocab(&self) -> VocabLayout {
        self.cfg.vocab()
    }

    // ── Forward ──────────────────────────────────────────────────────

    /// Forward over several sequences packed back to back; `seq_lens` must
    /// sum to `tokens.len()`. Positions restart per sequence and attention
    /// never crosses sequences, so packing is exactly equivalent to running
    /// each sequence alone.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        tokens: &[SeqToken],
        seq_lens: &[usize],
        branch: Branch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<NodeId>, NodeId), ModelError> {
        let vocab = self.vocab();
        assert_eq!(seq_lens.iter().sum::<usize>(), tokens.len(), "seq_lens must cover tokens");
        let mut bounds = Vec::with_capacity(seq_lens.len() + 1);
        bounds.push(0usize);
        for &len in seq_lens {
            if len > self.cfg.max_seq_len {
                return Err(ModelError::TooLong { len, max: self.cfg.max_seq_len });
            }
            bounds.push(bounds.last().unwrap() + len);
        }
        let span = self.cfg.symbol_span();
        let mut emb_ids: Vec<Option<usize>> = Vec::with_capacity(tokens.len());
        let mut cell_positions = Vec::new();
        let mut cell_symbols = Vec::new();
        for (pos, tok) in tokens.iter().enumerate() {
            match *tok {
                SeqToken::Tok(id) => {
                    if !vocab.in_vocab(id) {
                        return Err(ModelError::UnknownId { id, pos });
                    }
                    emb_ids.push(Some(id as usize));
                }
                SeqToken::Cell(sym) => {
                    if u64::from(sym) >= span {
                        return Err(ModelError::UnknownId { id: sym, pos });
                    }
                    emb_ids.push(None);
                    cell_positions.push(pos);
                    cell_symbols.push(sym);
                }
            }
        }

        let tok_emb = g.named("shared.tok_emb");
        let mut x = g.embedding_rows(tok_emb, &emb_ids);
        if !cell_positions.is_empty() {
            let conn = self.connector(g, &cell_symbols)?;
            let scattered = g.scatter_rows(conn, &cell_positions, tokens.len());
            x = g.add(x, scattered);
        }
        let mut pos_ids: Vec<Option<usize>> = Vec::with_capacity(tokens.len());
        for &len in seq_lens {
            pos_ids.extend((0..len).map(Some));
        }
        let pos_emb = g.named("shared.pos_emb");
        let pos = g.embedding_rows(pos_emb, &pos_ids);
        x = g.add(x, pos);

        let mut hidden = Vec::with_capacity(self.cfg.total_layers());
        for i in 0..self.cfg.m_shared {
            x = self.block(g, &format!("shared.block{i}"), x, &bounds, dropout.as_deref_mut());
            hidden.push(x);
        }
        let branch_prefix = match branch {
            Branch::Und => "und",
            Branch::Gen => "gen",
        };
        for j in 0..self.cfg.n_branch {
            x = self.block(
                g,
                &format!("{branch_prefix}.block{j}"),
                x,
                &bounds,
                dropout.as_deref_mut(),
            );
            hidden.push(x);
        }
        let norm_prefix = if self.cfg.n_branch == 0 {
            "shared.final_norm".to_string()
        } else {
            format!("{branch_prefix}.final_norm")
        };
        let gain = g.named(&format!("{norm_prefix}.g"));
        let bias = g.named(&format!("{norm_prefix}.b"));
        let final_norm = g.layer_norm(x, gain, bias, LN_EPS);
        Ok((hidden, final_norm))
    }

    /// Image-cell input features: concatenated per-level code embeddings
    /// through the two-layer MLP connector.
    fn connector(&self, g: &mut Graph, symbols: &[u32]) -> Result<NodeId, ModelError> {
        let vocab = self.vocab();
        let d = self.cfg.rvq_depth;
        let mut level_ids: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(symbols.len()); d];
        for &sym in symbols {
            let codes = rvq_encode(sym, d, self.cfg.image_codebook as u32)
                .map_err(|_| ModelError::UnknownId { id: sym, pos: 0 })?;
            for (lvl, &code) in codes.iter().enumerate() {
                level_ids[lvl].push(Some(vocab.code_id(code as usize) as usize));
            }
        }
        let tok_emb = g.named("shared.tok_emb");
        let parts: Vec<NodeId> =
            level_ids.iter().map(|ids| g.embedding_rows(tok_emb, ids)).collect();
        let cat = g.concat_cols(&parts);
        let w1 = g.named("shared.connector.fc1.w");
        let b1 = g.named("shared.connector.fc1.b");
        let w2 = g.named("shared.connector.fc2.w");
        let b2 = g.named("shared.connector.fc2.b");
        let h = g.matmul(cat, w1)?;
        let h = g.add_bias(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        Ok(g.add_bias(h, b2))
    }

    /// Pre-norm decoder block with causal attention and a 4× GELU MLP.
    fn block(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: NodeId,
        bounds: &[usize],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let ln1g = g.named(&format!("{prefix}.ln1.g"));
        let ln1b = g.named(&format!("{prefix}.ln1.b"));
        let h = g.layer_norm(x, ln1g, ln1b, LN_EPS);
        let wq = g.named(&format!("{prefix}.attn.wq"));
        let bq = g.named(&format!("{prefix}.attn.bq"));
        let wk = g.named(&format!("{prefix}.attn.wk"));
        let bk = g.named(&format!("{prefix}.attn.bk"));
        let wv = g.named(&format!("{prefix}.attn.wv"));
        let bv = g.named(&format!("{prefix}.attn.bv"));
        let q = g.matmul(h, wq).expect("block shapes");
        let q = g.add_bias(q, bq);
        let k = g.matmul(h, wk).expect("block shapes");
        let k = g.add_bias(k, bk);
        let v = g.matmul(h, wv).expect("block shapes");
        let v = g.add_bias(v, bv);
        let a = g.causal_attention_packed(q, k, v, self.cfg.n_heads, bounds);
        let wo = g.named(&format!("{prefix}.attn.wo"));
        let bo = g.named(&format!("{prefix}.attn.bo"));
        let a = g.matmul(a, wo).expect("block shapes");
        let a = g.add_bias(a, bo);
        let a = self.maybe_dropout(g, a, dropout.as_deref_mut());
        let x = g.add(x, a);

        let ln2g = g.named(&format!("{prefix}.ln2.g"));
        let ln2b = g.named(&format!("{prefix}.ln2.b"));
        let h2 = g.layer_norm(x, ln2g, ln2b, LN_EPS);
        let w1 = g.named(&format!("{prefix}.mlp.fc1.w"));
        let b1 = g.named(&format!("{prefix}.mlp.fc1.b"));
        let w2 = g.named(&format!("{prefix}.mlp.fc2.w"));
        let b2 = g.named(&format!("{prefix}.mlp.fc2.b"));
        let m = g.matmul(h2, w1).expect("block shapes");
        let m = g.add_bias(m, b1);
        let m = g.gelu(m);
        let m = g.matmul(m, w2).expect("block shapes");
        let m = g.add_bias(m, b2);
        let m = self.maybe_dropout(g, m, dropout);
        g.add(x, m)
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let p = self.cfg.dropout_prob;
        match dropout {
            Some(rng) if p > 0.0 => {
                let keep: Vec<f64> = (0..g.value(x).numel())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect();
                g.dropout(x, keep)
            }
            _ => x,
        }
    }

    /// Text-head logits for the given feature rows.
    pub fn text_logits(&self, g: &mut Graph, rows: NodeId) -> NodeId {
        let w = g.named("heads.text.w");
        let b = g.named("heads.text.b");
        let l = g.matmul(rows, w).expect("text head shapes");
        g.add_bias(l, b)
    }

    /// Full forward of one sequence through the selected branch.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[SeqToken],
        branch: Branch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphTrace, ModelError> {
        let (hidden, final_norm) =
            self.forward_features(g, tokens, &[tokens.len()], branch, dropout)?;
        let logits = self.text_logits(g, final_norm);
        Ok(GraphTrace { hidden, final_norm, logits })
    }

    /// Inference forward returning extracted per-layer states.
    pub fn forward(&self, tokens: &[SeqToken], branch: Branch) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::inference(&self.params);
        let trace = self.forward_graph(&mut g, tokens, branch, None)?;
        Ok(ForwardTrace {
            hidden_states: trace.hidden.iter().map(|&h| g.value(h).clone()).collect(),
            final_hidden: g.value(trace.final_norm).clone(),
            logits: g.value(trace.logits).clone(),
        })
    }

    // ── Vision head ──────────────────────────────────────────────────

    /// Teacher-forced code logits for every image position.
    ///
    /// `trunk_rows` are generation-branch output features, one row per image
    /// position; `teacher` the ground-truth codes per position. Step d of a
    /// position sees the trunk feature plus embeddings of its codes `..d`
    /// through a one-block causal depth head, so logits for step d never
    /// depend on codes `d..`. With depth 1 the head is a single projection.
    pub fn rvq_head_forward(
        &self,
        g: &mut Graph,
        trunk_rows: NodeId,
        teacher: &[Vec<u16>],
    ) -> Result<NodeId, ModelError> {
        let d = self.cfg.rvq_depth;
        let n = teacher.len();
        assert_eq!(g.value(trunk_rows).rows_cols().0, n, "one trunk row per position");
        for codes in teacher {
            assert_eq!(codes.len(), d, "teacher codes must have depth {d}");
        }
        if d == 1 {
            let w = g.named("heads.vision.out.w");
            let b = g.named("heads.vision.out.b");
            let l = g.matmul(trunk_rows, w)?;
            return Ok(g.add_bias(l, b));
        }
        // Depth row i*D+0 is the trunk feature; row i*D+k embeds code k-1.
        let trunk_dst: Vec<usize> = (0..n).map(|i| i * d).collect();
        let mut u = g.scatter_rows(trunk_rows, &trunk_dst, n * d);
        let code_emb = g.named("heads.vision.code_emb");
        for k in 1..d {
            let ids: Vec<Option<usize>> =
                teacher.iter().map(|codes| Some(codes[k - 1] as usize)).collect();
            let rows = g.embedding_rows(code_emb, &ids);
            let dst: Vec<usize> = (0..n).map(|i| i * d + k).collect();
            let scat = g.scatter_rows(rows, &dst, n * d);
            u = g.add(u, scat);
        }
        let dp_ids: Vec<Option<usize>> = (0..n * d).map(|r| Some(r % d)).collect();
        let depth_pos = g.named("heads.vision.depth_pos");
        let dp = g.embedding_rows(depth_pos, &dp_ids);
        u = g.add(u, dp);
        let bounds: Vec<usize> = (0..=n).map(|i| i * d).collect();
        let z = self.block(g, "heads.vision.block0", u, &bounds, None);
        let ng = g.named("heads.vision.norm.g");
        let nb = g.named("heads.vision.norm.b");
        let z = g.layer_norm(z, ng, nb, LN_EPS);
        let w = g.named("heads.vision.out.w");
        let b = g.named("heads.vision.out.b");
        let l = g.matmul(z, w)?;
        Ok(g.add_bias(l, b))
    }

    /// Sampling-time head step: logits for code `prefix.len()` of the
    /// position whose trunk feature is each row of `features`. All rows
    /// share the same code prefix (conditional and unconditional contexts
    /// decode one shared code stream).
    pub fn rvq_step_logits(
        &self,
        g: &mut Graph,
        features: NodeId,
        prefix: &[u16],
    ) -> Result<NodeId, ModelError> {
        let n = g.value(features).rows_cols().0;
        let prefixes: Vec<&[u16]> = vec![prefix; n];
        self.rvq_step_logits_multi(g, features, &prefixes)
    }

    /// As `rvq_step_logits` but with one code prefix per feature row; all
    /// prefixes must have equal length (the rows sit at the same depth
    /// step).
    pub fn rvq_step_logits_multi(
        &self,
        g: &mut Graph,
        features: NodeId,
        prefixes: &[&[u16]],
    ) -> Result<NodeId, ModelError> {
        let d = self.cfg.rvq_depth;
        let n = g.value(features).rows_cols().0;
        assert_eq!(prefixes.len(), n, "one prefix per feature row");
        let plen = prefixes.first().map_or(0, |p| p.len());
        assert!(plen < d, "all codes already emitted");
        assert!(prefixes.iter().all(|p| p.len() == plen), "ragged code prefixes");
        if d == 1 {
            let w = g.named("heads.vision.out.w");
            let b = g.named("heads.vision.out.b");
            let l = g.matmul(features, w)?;
            return Ok(g.add_bias(l, b));
        }
        let t = plen + 1;
        let trunk_dst: Vec<usize> = (0..n).map(|i| i * t).collect();
        let mut u = g.scatter_rows(features, &trunk_dst, n * t);
        let code_emb = g.named("heads.vision.code_emb");
        for k in 0..plen {
            let ids: Vec<Option<usize>> =
                prefixes.iter().map(|p| Some(p[k] as usize)).collect();
            let rows = g.embedding_rows(code_emb, &ids);
            let dst: Vec<usize> = (0..n).map(|i| i * t + k + 1).collect();
            let scat = g.scatter_rows(rows, &dst, n * t);
            u = g.add(u, scat);
        }
        let dp_ids: Vec<Option<usize>> = (0..n * t).map(|r| Some(r % t)).collect();
        let depth_pos = g.named("heads.vision.depth_pos");
        let dp = g.embedding_rows(depth_pos, &dp_ids);
        u = g.add(u, dp);
        let bounds: Vec<usize> = (0..=n).map(|i| i * t).collect();
        let z = self.block(g, "heads.vision.block0", u, &bounds, None);
        let ng = g.named("heads.vision.norm.g");
        let nb = g.named("heads.vision.norm.b");
        let z = g.layer_norm(z, ng, nb, LN_EPS);
        let last_rows: Vec<usize> = (0..n).map(|i| i * t + t - 1).collect();
        let z = g.select_rows(z, &last_rows);
        let w = g.named("heads.vision.out.w");
        let b = g.named("heads.vision.out.b");
        let l = g.matmul(z, w)?;
        Ok(g.add_bias(l, b))
    }

    // ── Parameter bookkeeping ────────────────────────────────────────

    /// Three-way partition of parameter names. The connector sits in the
    /// shared set: both tasks read images through it, so branch isolation
    /// requires it outside either branch.
    pub fn param_partition(&self) -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<String>) {
        let mut shared = BTreeSet::new();
        let mut und = BTreeSet::new();
        let mut gen = BTreeSet::new();
        for name in self.params.names() {
            if name.starts_with("und.") || name.starts_with("heads.text.") {
                und.insert(name.to_string());
            } else if name.starts_with("gen.") || name.starts_with("heads.vision.") {
                gen.insert(name.to_string());
            } else {
                debug_assert!(name.starts_with("shared."), "unclassified parameter {name}");
                shared.insert(name.to_string());
            }
        }
        (shared, und, gen)
    }

    pub fn branch_params(&self, branch: Branch) -> BTreeSet<String> {
        let (_, und, gen) = self.param_partition();
        match branch {
            Branch::Und => und,
            Branch::Gen => gen,
        }
    }

    pub fn shared_params(&self) -> BTreeSet<String> {
        self.param_partition().0
    }

    /// Parameters traversed when running one task: shared plus one branch.
    pub fn active_param_count(&self, branch: Branch) -> usize {
        let (shared, und, gen) = self.param_partition();
        let active = match branch {
            Branch::Und => und,
            Branch::Gen => gen,
        };
        shared
            .iter()
            .chain(active.iter())
            .map(|n| self.params.get(n).numel())
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.total_elems()
    }
}

fn fork_source_name(name: &str, m: usize) -> String {
    for branch in ["und.", "gen."] {
        if let Some(rest) = name.strip_prefix(branch) {
            if let Some(block_rest) = rest.strip_prefix("block") {
                let dot = block_rest.find('.').expect("block param name");
                let j: usize = block_rest[..dot].parse().expect("block index");
                return format!("shared.block{}{}", m + j, &block_rest[dot..]);
            }
            if let Some(norm_rest) = rest.strip_prefix("final_norm") {
                return format!("shared.final_norm{norm_rest}");
            }
        }
    }
    name.to_string()
}
