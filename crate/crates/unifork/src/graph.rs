//! Reverse-mode autodiff on a flat op tape.
//!
//! A `Graph` records ops against a read-only `ParamStore`; node indices are
//! already in topological order, so `backward` is a single reverse sweep.
//! Everything is f64 and single-threaded per graph; independent graphs (one
//! per batch sample) can run on separate threads and their parameter
//! gradients are reduced in sample order afterwards.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::tensor::Tensor;

// ── Parameter store ──────────────────────────────────────────────────

/// Named, ordered parameter tensors. Insertion order is the canonical
/// order used by checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t.with_grad());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> ParamId {
        ParamId(*self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}")))
    }

    pub fn try_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.id(name).0]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let ix = self.id(name).0;
        &mut self.tensors[ix]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// Per-parameter gradients, aligned with a `ParamStore`.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads { slots: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Tensor> {
        self.get(store.id(name))
    }

    fn accumulate(&mut self, id: ParamId, shape: &[usize], g: &[f64]) {
        let slot = &mut self.slots[id.0];
        match slot {
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
            None => *slot = Some(Tensor::new(shape.to_vec(), g.to_vec())),
        }
    }

    /// Accumulate a gradient for a named parameter.
    pub fn add_named(&mut self, store: &ParamStore, name: &str, g: &Tensor) {
        self.accumulate(store.id(name), g.shape(), g.data());
    }

    /// Add another gradient set into this one (sample-order reduction).
    pub fn add_assign(&mut self, other: &Grads) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(s) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for slot in self.slots.iter().flatten() {
            for v in slot.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

// ── Matmul kernels ───────────────────────────────────────────────────

/// c[m×n] += a[m×k] · b[k×n]
fn matmul_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cc, &bb) in crow.iter_mut().zip(brow) {
                *cc += av * bb;
            }
        }
    }
}

/// c[m×k] += a[m×n] · bᵀ where b is [k×n]
fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (cp, brow) in crow.iter_mut().zip(b.chunks_exact(n)) {
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cp += s;
        }
    }
}

/// c[k×n] += aᵀ · b where a is [m×k], b is [m×n]
fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cc, &bb) in crow.iter_mut().zip(brow) {
                *cc += av * bb;
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_inner_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

fn gelu_grad_scalar(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── Graph ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Payload {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddBias { x: NodeId, bias: NodeId },
    Gelu { x: NodeId, tanh: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<(f64, f64)> },
    SoftmaxRows { x: NodeId },
    EmbeddingRows { table: NodeId, ids: Vec<Option<usize>> },
    ScatterRows { src: NodeId, dst: Vec<usize> },
    SelectRows { src: NodeId, rows: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize, bounds: Vec<usize>, probs: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    SumAll { x: NodeId },
    Dropout { x: NodeId, keep: Vec<f64> },
}

struct Node {
    payload: Payload,
    op: Op,
    requires_grad: bool,
}

/// An op tape over borrowed parameters. `track = false` builds an
/// inference-only graph (no backward caches, no grad bookkeeping).
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    staged: HashMap<usize, NodeId>,
    track: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), staged: HashMap::new(), track: true }
    }

    pub fn inference(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), staged: HashMap::new(), track: false }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].payload {
            Payload::Owned(t) => t,
            Payload::Param(p) => self.params.tensor(*p),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            payload: Payload::Owned(value),
            op,
            requires_grad: requires_grad && self.track,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Stage a parameter as a leaf (at most one node per parameter).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.staged.get(&id.0) {
            return n;
        }
        let rg = self.params.tensor(id).requires_grad() && self.track;
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node { payload: Payload::Param(id), op: Op::Param(id), requires_grad: rg });
        self.staged.insert(id.0, node);
        node
    }

    pub fn named(&mut self, name: &str) -> NodeId {
        self.param(self.params.id(name))
    }

    /// Constant input leaf (no gradient).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.value(a).check_dims2("matmul lhs")?;
        let (kb, n) = self.value(b).check_dims2("matmul rhs")?;
        if ka != kb {
            return Err(TensorError::Shape(format!(
                "matmul inner dims disagree: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(&mut out, self.value(a).data(), self.value(b).data(), m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::Scale { x, c }, rg)
    }

    /// x[..×C] + bias[C], broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.value(x).rows_cols();
        assert_eq!(self.value(bias).numel(), c, "bias length mismatch");
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let _ = r;
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(shape, out), Op::AddBias { x, bias }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).data();
        let rg = self.rg(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut tanh = Vec::with_capacity(if rg { xv.len() } else { 0 });
        if rg {
            for &v in xv {
                let t = gelu_inner_tanh(v);
                tanh.push(t);
                out.push(0.5 * v * (1.0 + t));
            }
        } else {
            out.extend(xv.iter().map(|&v| 0.5 * v * (1.0 + gelu_inner_tanh(v))));
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Gelu { x, tanh }, rg)
    }

    /// Per-last-dim normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.value(x).rows_cols();
        assert_eq!(self.value(gain).numel(), c, "layer_norm gain length");
        assert_eq!(self.value(bias).numel(), c, "layer_norm bias length");
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            let orow = &mut out[i * c..(i + 1) * c];
            for (((o, &xv), &gv), &bv) in orow.iter_mut().zip(row).zip(g).zip(b) {
                *o = (xv - mean) * rstd * gv + bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let stats = if rg { stats } else { Vec::new() };
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, bias, stats }, rg)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.value(x).rows_cols();
        assert!(c >= 1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            softmax_into(row, orow);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::SoftmaxRows { x }, rg)
    }

    /// Row gather from an embedding table; `None` ids produce zero rows.
    pub fn embedding_rows(&mut self, table: NodeId, ids: &[Option<usize>]) -> NodeId {
        let (v, c) = self.value(table).rows_cols();
        let mut out = vec![0.0; ids.len() * c];
        let tv = self.value(table).data();
        for (i, id) in ids.iter().enumerate() {
            if let Some(ix) = id {
                assert!(*ix < v, "embedding id {ix} out of range {v}");
                out[i * c..(i + 1) * c].copy_from_slice(&tv[ix * c..(ix + 1) * c]);
            }
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), c], out),
            Op::EmbeddingRows { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Scatter rows of `src` into a zero matrix of `out_rows` rows.
    /// Destination rows must be distinct.
    pub fn scatter_rows(&mut self, src: NodeId, dst: &[usize], out_rows: usize) -> NodeId {
        let (r, c) = self.value(src).rows_cols();
        assert_eq!(r, dst.len(), "scatter_rows count mismatch");
        let mut out = vec![0.0; out_rows * c];
        let sv = self.value(src).data();
        for (i, &d) in dst.iter().enumerate() {
            assert!(d < out_rows);
            out[d * c..(d + 1) * c].copy_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        self.push(
            Tensor::new(vec![out_rows, c], out),
            Op::ScatterRows { src, dst: dst.to_vec() },
            rg,
        )
    }

    /// Gather rows (repeats allowed).
    pub fn select_rows(&mut self, src: NodeId, rows: &[usize]) -> NodeId {
        let (r, c) = self.value(src).rows_cols();
        let mut out = vec![0.0; rows.len() * c];
        let sv = self.value(src).data();
        for (i, &s) in rows.iter().enumerate() {
            assert!(s < r, "select_rows index {s} out of {r}");
            out[i * c..(i + 1) * c].copy_from_slice(&sv[s * c..(s + 1) * c]);
        }
        let rg = self.rg(src);
        self.push(
            Tensor::new(vec![rows.len(), c], out),
            Op::SelectRows { src, rows: rows.to_vec() },
            rg,
        )
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows_cols().0;
        let cols: Vec<usize> = parts.iter().map(|&p| self.value(p).rows_cols().1).collect();
        let total: usize = cols.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let (pr, pc) = self.value(p).rows_cols();
            assert_eq!(pr, r, "concat_cols row mismatch");
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += cols[pi];
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![r, total], out),
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        )
    }

    /// Multi-head causal self-attention over `n_seqs` packed sequences of
    /// equal length.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        n_seqs: usize,
    ) -> NodeId {
        let rows = self.value(q).rows_cols().0;
        assert_eq!(rows % n_seqs, 0, "rows not divisible by n_seqs");
        let t = rows / n_seqs;
        let bounds: Vec<usize> = (0..=n_seqs).map(|s| s * t).collect();
        self.causal_attention_packed(q, k, v, n_heads, &bounds)
    }

    /// Causal attention over packed sequences with arbitrary lengths.
    /// `bounds` holds the row offset of each sequence start plus the total
    /// row count. Position `i` attends to positions `j <= i` of its own
    /// sequence only; probabilities above the diagonal are exact zeros that
    /// the matmul kernels skip, so later inputs are structurally invisible —
    /// no masking epsilon involved.
    pub fn causal_attention_packed(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        bounds: &[usize],
    ) -> NodeId {
        let (rows, c) = self.value(q).rows_cols();
        assert_eq!(self.value(k).shape(), self.value(q).shape());
        assert_eq!(self.value(v).shape(), self.value(q).shape());
        assert!(bounds.len() >= 2 && bounds[0] == 0 && *bounds.last().unwrap() == rows);
        assert_eq!(c % n_heads, 0, "d_model not divisible by n_heads");
        let n_seqs = bounds.len() - 1;
        let dh = c / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);

        let probs_len: usize = (0..n_seqs)
            .map(|s| {
                let t = bounds[s + 1] - bounds[s];
                n_heads * t * t
            })
            .sum();
        let mut out = vec![0.0; rows * c];
        let mut probs = vec![0.0; probs_len];
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        let mut scores = Vec::new();
        let mut oh = Vec::new();
        let mut pofs = 0;
        for s in 0..n_seqs {
            let s0 = bounds[s];
            let t = bounds[s + 1] - s0;
            for h in 0..n_heads {
                let hc = h * dh;
                gather_head(&mut qh, qv, s0, t, c, hc, dh);
                gather_head(&mut kh, kv, s0, t, c, hc, dh);
                gather_head(&mut vh, vv, s0, t, c, hc, dh);
                // Scores for the full square (entries above the diagonal are
                // discarded before the softmax ever reads them).
                scores.clear();
                scores.resize(t * t, 0.0);
                matmul_nt_acc(&mut scores, &qh, &kh, t, dh, t);
                let ptile = &mut probs[pofs + h * t * t..pofs + (h + 1) * t * t];
                for i in 0..t {
                    for v in scores[i * t..i * t + i + 1].iter_mut() {
                        *v *= scale;
                    }
                    softmax_into(
                        &scores[i * t..i * t + i + 1],
                        &mut ptile[i * t..i * t + i + 1],
                    );
                }
                oh.clear();
                oh.resize(t * dh, 0.0);
                matmul_nn_acc(&mut oh, ptile, &vh, t, t, dh);
                scatter_head(&oh, &mut out, s0, t, c, hc, dh);
            }
            pofs += n_heads * t * t;
        }
        let probs = if rg { probs } else { Vec::new() };
        self.push(
            Tensor::new(vec![rows, c], out),
            Op::CausalAttention { q, k, v, n_heads, bounds: bounds.to_vec(), probs },
            rg,
        )
    }

    /// Mean of −log softmax(logits)[target] over masked-in rows.
    /// Masked-out rows contribute exactly nothing.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId, TensorError> {
        let (r, v) = self.value(logits).rows_cols();
        assert_eq!(targets.len(), r, "targets length mismatch");
        assert_eq!(mask.len(), r, "mask length mismatch");
        let n_in = mask.iter().filter(|&&m| m).count();
        if n_in == 0 {
            return Err(TensorError::EmptyMask);
        }
        for i in 0..r {
            if mask[i] && targets[i] >= v {
                return Err(TensorError::TargetOutOfRange { id: targets[i], vocab: v });
            }
        }
        let lv = self.value(logits).data();
        let rg = self.rg(logits);
        let mut probs = vec![0.0; if rg { r * v } else { 0 }];
        let mut loss = 0.0;
        let mut buf = vec![0.0; v];
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            softmax_into(row, &mut buf);
            loss += -buf[targets[i]].max(f64::MIN_POSITIVE).ln();
            if rg {
                probs[i * v..(i + 1) * v].copy_from_slice(&buf);
            }
        }
        loss /= n_in as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    /// Inverted dropout with precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: NodeId, keep: Vec<f64>) -> NodeId {
        assert_eq!(keep.len(), self.value(x).numel());
        let out: Vec<f64> =
            self.value(x).data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::Dropout { x, keep }, rg)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// parameter that the root depends on.
    pub fn backward(&self, root: NodeId) -> Result<Grads, TensorError> {
        if !self.value(root).is_scalar() {
            return Err(TensorError::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        assert!(self.track, "backward on an inference graph");
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        node_grads[root.0] = Some(vec![1.0]);
        let mut out = Grads::zeros(self.params);

        for ix in (0..self.nodes.len()).rev() {
            if !self.nodes[ix].requires_grad {
                continue;
            }
            let Some(g) = node_grads[ix].take() else { continue };
            match &self.nodes[ix].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    out.accumulate(*pid, self.params.tensor(*pid).shape(), &g);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.value(*a).rows_cols();
                    let n = self.value(*b).rows_cols().1;
                    if self.rg(*a) {
                        let ga = self.grad_buf(&mut node_grads, *a);
                        matmul_nt_acc(ga, &g, self.value(*b).data(), m, n, k);
                    }
                    if self.rg(*b) {
                        let gb = self.grad_buf(&mut node_grads, *b);
                        matmul_tn_acc(gb, self.value(*a).data(), &g, m, k, n);
                    }
                }
                Op::Add { a, b } => {
                    for &src in &[*a, *b] {
                        if self.rg(src) {
                            let gs = self.grad_buf(&mut node_grads, src);
                            for (d, s) in gs.iter_mut().zip(&g) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let bv = self.value(*b).data();
                        let ga = node_grads[a.0].get_or_insert_with(|| vec![0.0; bv.len()]);
                        for ((d, &gv), &bb) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gv * bb;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data();
                        let gb = node_grads[b.0].get_or_insert_with(|| vec![0.0; av.len()]);
                        for ((d, &gv), &aa) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gv * aa;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.rg(*x) {
                        let c = *c;
                        let gx = self.grad_buf(&mut node_grads, *x);
                        for (d, &gv) in gx.iter_mut().zip(&g) {
                            *d += gv * c;
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let (r, c) = self.value(*x).rows_cols();
                    if self.rg(*x) {
                        let gx = self.grad_buf(&mut node_grads, *x);
                        for (d, s) in gx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if self.rg(*bias) {
                        let gb = self.grad_buf(&mut node_grads, *bias);
                        let _ = r;
                        for grow in g.chunks_exact(c) {
                            for (d, &gv) in gb.iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Gelu { x, tanh } => {
                    if self.rg(*x) {
                        let xv = self.value(*x).data();
                        let gx = node_grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
                        for (((d, &gv), &xx), &t) in gx.iter_mut().zip(&g).zip(xv).zip(tanh) {
                            *d += gv * gelu_grad_scalar(xx, t);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    self.layer_norm_backward(&mut node_grads, &g, *x, *gain, *bias, stats);
                }
                Op::SoftmaxRows { x } => {
                    if self.rg(*x) {
                        let (r, c) = self.value(ix_node(ix)).rows_cols();
                        let yv = self.value(ix_node(ix)).data().to_vec();
                        let gx = self.grad_buf(&mut node_grads, *x);
                        for i in 0..r {
                            let y = &yv[i * c..(i + 1) * c];
                            let gy = &g[i * c..(i + 1) * c];
                            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                            let go = &mut gx[i * c..(i + 1) * c];
                            for ((d, &yv), &gv) in go.iter_mut().zip(y).zip(gy) {
                                *d += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::EmbeddingRows { table, ids } => {
                    if self.rg(*table) {
                        let c = self.value(*table).rows_cols().1;
                        let gt = self.grad_buf(&mut node_grads, *table);
                        for (i, id) in ids.iter().enumerate() {
                            if let Some(ixr) = id {
                                let grow = &g[i * c..(i + 1) * c];
                                let trow = &mut gt[ixr * c..(ixr + 1) * c];
                                for j in 0..c {
                                    trow[j] += grow[j];
                                }
                            }
                        }
                    }
                }
                Op::ScatterRows { src, dst } => {
                    if self.rg(*src) {
                        let c = self.value(*src).rows_cols().1;
                        let gs = self.grad_buf(&mut node_grads, *src);
                        for (i, &d) in dst.iter().enumerate() {
                            let grow = &g[d * c..(d + 1) * c];
                            let srow = &mut gs[i * c..(i + 1) * c];
                            for j in 0..c {
                                srow[j] += grow[j];
                            }
                        }
                    }
                }
                Op::SelectRows { src, rows } => {
                    if self.rg(*src) {
                        let c = self.value(*src).rows_cols().1;
                        let gs = self.grad_buf(&mut node_grads, *src);
                        for (i, &s) in rows.iter().enumerate() {
                            let grow = &g[i * c..(i + 1) * c];
                            let srow = &mut gs[s * c..(s + 1) * c];
                            for j in 0..c {
                                srow[j] += grow[j];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = self.value(ix_node(ix)).rows_cols().1;
                    let r = self.value(ix_node(ix)).rows_cols().0;
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).rows_cols().1;
                        if self.rg(p) {
                            let gp = self.grad_buf(&mut node_grads, p);
                            for i in 0..r {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * total + off + j];
                                }
                            }
                        }
                        off += pc;
                    }
                }
                Op::CausalAttention { q, k, v, n_heads, bounds, probs } => {
                    self.attention_backward(
                        &mut node_grads, &g, *q, *k, *v, *n_heads, bounds, probs,
                    );
                }
                Op::CrossEntropy { logits, targets, mask, probs } => {
                    if self.rg(*logits) {
                        let (r, v) = self.value(*logits).rows_cols();
                        let n_in = mask.iter().filter(|&&m| m).count() as f64;
                        let scale = g[0] / n_in;
                        let gl = self.grad_buf(&mut node_grads, *logits);
                        for i in 0..r {
                            if !mask[i] {
                                continue;
                            }
                            let prow = &probs[i * v..(i + 1) * v];
                            let grow = &mut gl[i * v..(i + 1) * v];
                            for (d, &pv) in grow.iter_mut().zip(prow) {
                                *d += scale * pv;
                            }
                            grow[targets[i]] -= scale;
                        }
                    }
                }
                Op::SumAll { x } => {
                    if self.rg(*x) {
                        let gx = self.grad_buf(&mut node_grads, *x);
                        for d in gx.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Dropout { x, keep } => {
                    if self.rg(*x) {
                        let gx = self.grad_buf(&mut node_grads, *x);
                        for ((d, &gv), &kv) in gx.iter_mut().zip(&g).zip(keep) {
                            *d += gv * kv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Grad buffer for a node, allocated on first touch.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'g>(
        &self,
        node_grads: &'g mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> &'g mut Vec<f64> {
        let n = self.value(id).numel();
        node_grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn layer_norm_backward(
        &self,
        node_grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: &[(f64, f64)],
    ) {
        let (r, c) = self.value(x).rows_cols();
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        if self.rg(*&x) {
            let mut gx_local = vec![0.0; r * c];
            for i in 0..r {
                let (mean, rstd) = stats[i];
                let xrow = &xv[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let mut sum_dyg = 0.0;
                let mut sum_dyg_xhat = 0.0;
                for ((&xx, &gr), &gg) in xrow.iter().zip(grow).zip(gv) {
                    let xh = (xx - mean) * rstd;
                    let dyg = gr * gg;
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xh;
                }
                let inv_c = 1.0 / c as f64;
                let orow = &mut gx_local[i * c..(i + 1) * c];
                for (((o, &xv), &gr), &gg) in orow.iter_mut().zip(xrow).zip(grow).zip(gv) {
                    let xh = (xv - mean) * rstd;
                    *o = rstd * (gr * gg - inv_c * sum_dyg - xh * inv_c * sum_dyg_xhat);
                }
            }
            let gx = self.grad_buf(node_grads, x);
            for (d, s) in gx.iter_mut().zip(&gx_local) {
                *d += s;
            }
        }
        if self.rg(gain) {
            let gg = self.grad_buf(node_grads, gain);
            for (i, (grow, xrow)) in g.chunks_exact(c).zip(xv.chunks_exact(c)).enumerate() {
                let (mean, rstd) = stats[i];
                for ((d, &gv2), &xx) in gg.iter_mut().zip(grow).zip(xrow) {
                    *d += gv2 * (xx - mean) * rstd;
                }
            }
        }
        if self.rg(bias) {
            let gb = self.grad_buf(node_grads, bias);
            for grow in g.chunks_exact(c) {
                for (d, &gv2) in gb.iter_mut().zip(grow) {
                    *d += gv2;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node_grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        bounds: &[usize],
        probs: &[f64],
    ) {
        let (rows, c) = self.value(q).rows_cols();
        let n_seqs = bounds.len() - 1;
        let dh = c / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();

        let mut gq = vec![0.0; rows * c];
        let mut gk = vec![0.0; rows * c];
        let mut gv = vec![0.0; rows * c];
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        let mut goh = Vec::new();
        let mut dp = Vec::new();
        let mut ds = Vec::new();
        let mut buf = Vec::new();
        let mut pofs = 0;
        for s in 0..n_seqs {
            let s0 = bounds[s];
            let t = bounds[s + 1] - s0;
            for h in 0..n_heads {
                let hc = h * dh;
                gather_head(&mut qh, qv, s0, t, c, hc, dh);
                gather_head(&mut kh, kv, s0, t, c, hc, dh);
                gather_head(&mut vh, vv, s0, t, c, hc, dh);
                gather_head(&mut goh, g, s0, t, c, hc, dh);
                let ptile = &probs[pofs + h * t * t..pofs + (h + 1) * t * t];
                // dV = probsᵀ · dOut (zero entries above the diagonal skip)
                buf.clear();
                buf.resize(t * dh, 0.0);
                matmul_tn_acc(&mut buf, ptile, &goh, t, t, dh);
                scatter_head_acc(&buf, &mut gv, s0, t, c, hc, dh);
                // dprobs = dOut · Vᵀ (upper triangle is garbage, masked next)
                dp.clear();
                dp.resize(t * t, 0.0);
                matmul_nt_acc(&mut dp, &goh, &vh, t, dh, t);
                // softmax backward within each causal window
                ds.clear();
                ds.resize(t * t, 0.0);
                for i in 0..t {
                    let prow = &ptile[i * t..i * t + i + 1];
                    let dprow = &dp[i * t..i * t + i + 1];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += prow[j] * dprow[j];
                    }
                    let dsrow = &mut ds[i * t..i * t + i + 1];
                    for j in 0..=i {
                        dsrow[j] = prow[j] * (dprow[j] - dot) * scale;
                    }
                }
                // dQ = ds · K, dK = dsᵀ · Q (both skip the zero triangle)
                buf.clear();
                buf.resize(t * dh, 0.0);
                matmul_nn_acc(&mut buf, &ds, &kh, t, t, dh);
                scatter_head_acc(&buf, &mut gq, s0, t, c, hc, dh);
                buf.clear();
                buf.resize(t * dh, 0.0);
                matmul_tn_acc(&mut buf, &ds, &qh, t, t, dh);
                scatter_head_acc(&buf, &mut gk, s0, t, c, hc, dh);
            }
            pofs += n_heads * t * t;
        }
        for (src, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(src) {
                let gs = self.grad_buf(node_grads, src);
                for (d, s) in gs.iter_mut().zip(&buf) {
                    *d += s;
                }
            }
        }
    }
}

fn ix_node(ix: usize) -> NodeId {
    NodeId(ix)
}

/// Copy one head's columns into a contiguous [t × dh] buffer.
fn gather_head(dst: &mut Vec<f64>, src: &[f64], s0: usize, t: usize, c: usize, hc: usize, dh: usize) {
    dst.clear();
    for i in 0..t {
        dst.extend_from_slice(&src[(s0 + i) * c + hc..(s0 + i) * c + hc + dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], s0: usize, t: usize, c: usize, hc: usize, dh: usize) {
    for i in 0..t {
        dst[(s0 + i) * c + hc..(s0 + i) * c + hc + dh]
            .copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn scatter_head_acc(
    src: &[f64],
    dst: &mut [f64],
    s0: usize,
    t: usize,
    c: usize,
    hc: usize,
    dh: usize,
) {
    for i in 0..t {
        let d = &mut dst[(s0 + i) * c + hc..(s0 + i) * c + hc + dh];
        for (a, b) in d.iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *a += b;
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.0, 5.0]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let eye = g.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let bn = g.input(b.clone());
        let c = g.matmul(eye, bn).unwrap();
        assert_eq!(g.value(c).data(), b.data());
    }

    #[test]
    fn matmul_hand_case() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let b = g.input(Tensor::new(vec![2, 1], vec![3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x2 = g.input(Tensor::new(vec![1, 2], vec![1000.0, 0.0]));
        let y2 = g.softmax_rows(x2);
        let d = g.value(y2).data();
        assert!(d[0] > 1.0 - 1e-12 && d[0].is_finite());
        assert!(d[1] >= 0.0 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = substream(11, "test");
        let t = Tensor::randn(vec![5, 9], 3.0, &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(t);
        let y = g.softmax_rows(x);
        for i in 0..5 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // one-hot with huge margin -> ~0
        let l = g.input(Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]));
        let loss = g.cross_entropy(l, &[0], &[true]).unwrap();
        assert!(g.value(loss).item() < 1e-12);
        // uniform over V=4 -> ln 4
        let l2 = g.input(Tensor::zeros(vec![2, 4]));
        let loss2 = g.cross_entropy(l2, &[1, 3], &[true, true]).unwrap();
        assert!((g.value(loss2).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_out_target_is_ignored() {
        let mut rng = substream(5, "test");
        let t = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(t.clone());
        let a = g.cross_entropy(l, &[1, 2, 3], &[true, false, true]).unwrap();
        let av = g.value(a).item();
        let mut g2 = Graph::new(&store);
        let l2 = g2.input(t);
        let b = g2.cross_entropy(l2, &[1, 4, 3], &[true, false, true]).unwrap();
        assert_eq!(av.to_bits(), g2.value(b).item().to_bits());
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            g.cross_entropy(l, &[0, 0], &[false, false]),
            Err(TensorError::EmptyMask)
        ));
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let mut rng = substream(6, "test");
        let t = Tensor::randn(vec![4, 7], 2.0, &mut rng);
        let shifted = Tensor::new(
            vec![4, 7],
            t.data().iter().map(|v| v + 123.456).collect(),
        );
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(t);
        let b = g.input(shifted);
        let mask = [true; 4];
        let tgt = [0usize, 3, 6, 2];
        let la = g.cross_entropy(a, &tgt, &mask).unwrap();
        let lb = g.cross_entropy(b, &tgt, &mask).unwrap();
        assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let store = store_with("x", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let mut g = Graph::new(&store);
        let x = g.named("x");
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.by_name(&store, "x").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_square_gives_x() {
        let data = vec![1.0, -2.0, 0.5, 3.0];
        let store = store_with("x", Tensor::new(vec![2, 2], data.clone()));
        let mut g = Graph::new(&store);
        let x = g.named("x");
        let xx = g.mul(x, x);
        let s = g.sum_all(xx);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.by_name(&store, "x").unwrap().data(), data.as_slice());
    }

    #[test]
    fn backward_non_scalar_root_errors() {
        let store = store_with("x", Tensor::zeros(vec![2, 2]));
        let mut g = Graph::new(&store);
        let x = g.named("x");
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let mut rng = substream(9, "test");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::randn(vec![6, 6], 0.5, &mut rng));
        store.insert("g", Tensor::filled(vec![6], 1.0));
        store.insert("b", Tensor::zeros(vec![6]));
        let run = || {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::new(
                vec![2, 6],
                (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
            ));
            let w = g.named("w");
            let gg = g.named("g");
            let bb = g.named("b");
            let h = g.matmul(x, w).unwrap();
            let n = g.layer_norm(h, gg, bb, 1e-5);
            let a = g.causal_attention(n, n, n, 2, 1);
            let s = g.sum_all(a);
            let grads = g.backward(s).unwrap();
            (
                g.value(s).item().to_bits(),
                grads
                    .by_name(&store, "w")
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
