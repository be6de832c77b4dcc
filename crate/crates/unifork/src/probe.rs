//! Layer-wise modality alignment probing.
//!
//! For a set of scenes, pooled per-layer image features are compared with a
//! pooled text reference feature using mutual k-nearest neighbors: each
//! sample's k nearest neighbors are found in both feature spaces and the
//! score is the mean overlap fraction. Curves of the per-layer scores are
//! summarized by Spearman rank correlation and peak location.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ModelError, ProbeError};
use crate::model::{Branch, ForkedTransformer};
use crate::tensor::Tensor;
use crate::toyworld::{
    build_sample, caption_template, und_query, Scene, SeqToken, StageFormat, Task,
};
use crate::vocab::Special;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Which text feature the und-task score uses: the final layer's (primary)
/// or the matching layer's (option).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRef {
    FinalLayer,
    PerLayer,
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub k: usize,
    pub metric: Metric,
    /// Number of probe scenes B.
    pub b: usize,
    pub text_ref: TextRef,
    /// Probe generated images instead of ground-truth renders.
    pub use_sampled_images: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 10,
            metric: Metric::Euclidean,
            b: 500,
            text_ref: TextRef::FinalLayer,
            use_sampled_images: false,
        }
    }
}

/// B pooled feature vectors with aligned sample labels.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub vectors: Tensor,
    pub labels: Vec<u64>,
}

impl FeatureSet {
    pub fn new(vectors: Tensor, labels: Vec<u64>) -> Self {
        assert_eq!(vectors.rows_cols().0, labels.len());
        FeatureSet { vectors, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Gen,
    Und,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlignmentCurve {
    pub task: ProbeTask,
    /// A_l for l = 1..M+N, each in [0, 1].
    pub scores: Vec<f64>,
}

// ── Mutual kNN ───────────────────────────────────────────────────────

fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Indices of each row's k nearest neighbors (self excluded), distance ties
/// broken by smaller sample index.
fn knn_indices(set: &FeatureSet, k: usize, metric: Metric) -> Vec<Vec<usize>> {
    let (b, _) = set.vectors.rows_cols();
    (0..b)
        .map(|i| {
            let mut dists: Vec<(f64, usize)> = (0..b)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = match metric {
                        Metric::Euclidean => {
                            squared_euclidean(set.vectors.row(i), set.vectors.row(j))
                        }
                        Metric::Cosine => cosine_distance(set.vectors.row(i), set.vectors.row(j)),
                    };
                    (d, j)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dists.truncate(k);
            dists.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Mean over samples of |kNN_a(i) ∩ kNN_b(i)| / k.
pub fn mutual_knn(a: &FeatureSet, b: &FeatureSet, k: usize, metric: Metric) -> Result<f64, ProbeError> {
    if a.len() != b.len() || a.labels != b.labels {
        return Err(ProbeError::Mismatch(format!(
            "feature sets have {} vs {} samples or differing labels",
            a.len(),
            b.len()
        )));
    }
    if k == 0 || k >= a.len() {
        return Err(ProbeError::BadK { k, b: a.len() });
    }
    let na = knn_indices(a, k, metric);
    let nb = knn_indices(b, k, metric);
    let mut total = 0usize;
    for (sa, sb) in na.iter().zip(&nb) {
        total += sa.iter().filter(|j| sb.contains(j)).count();
    }
    Ok(total as f64 / (k * a.len()) as f64)
}

// ── Feature collection ───────────────────────────────────────────────

fn mean_rows(states: &Tensor, rows: &[usize]) -> Vec<f64> {
    let (_, c) = states.rows_cols();
    let mut out = vec![0.0; c];
    for &r in rows {
        for (o, v) in out.iter_mut().zip(states.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

fn positions_of_cells(tokens: &[SeqToken]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| matches!(t, SeqToken::Cell(_)).then_some(i))
        .collect()
}

fn feature_sets_from(
    per_scene: Vec<(u64, Vec<Vec<f64>>)>,
    n_layers: usize,
    c: usize,
) -> Vec<FeatureSet> {
    let labels: Vec<u64> = per_scene.iter().map(|(l, _)| *l).collect();
    (0..n_layers)
        .map(|l| {
            let mut data = Vec::with_capacity(per_scene.len() * c);
            for (_, layers) in &per_scene {
                data.extend_from_slice(&layers[l]);
            }
            FeatureSet::new(Tensor::new(vec![per_scene.len(), c], data), labels.clone())
        })
        .collect()
}

/// Per-layer pooled image features plus the pooled text reference(s) for
/// the generation task: teacher-forced forward over "<caption><image>"
/// through the generation branch. The text feature is the final layer's
/// mean over caption positions from the same pass.
pub fn collect_gen_features(
    model: &ForkedTransformer,
    scenes: &[(u64, Scene)],
    grids: Option<&[crate::toyworld::GridImage]>,
) -> Result<(Vec<FeatureSet>, FeatureSet), ModelError> {
    let vocab = model.vocab();
    let n_layers = model.cfg.total_layers();
    let c = model.cfg.d_model;
    let rows: Result<Vec<(u64, Vec<Vec<f64>>, Vec<f64>)>, ModelError> = scenes
        .par_iter()
        .enumerate()
        .map(|(ix, (label, scene))| {
            let mut rng = crate::rng::keyed(0, "probe-nodrop", &[]);
            let mut sample =
                build_sample(scene, Task::Gen, StageFormat::Pretrain, 0.0, &vocab, &mut rng);
            if let Some(gs) = grids {
                let mut cell_iter = gs[ix].cells.iter();
                for tok in sample.tokens.iter_mut() {
                    if let SeqToken::Cell(sym) = tok {
                        *sym = *cell_iter.next().expect("grid size matches");
                    }
                }
            }
            let trace = model.forward(&sample.tokens, Branch::Gen)?;
            let cells = positions_of_cells(&sample.tokens);
            let caption_len = caption_template(scene).len();
            let caption_rows: Vec<usize> = (1..1 + caption_len).collect();
            let layer_feats: Vec<Vec<f64>> = trace
                .hidden_states
                .iter()
                .map(|h| mean_rows(h, &cells))
                .collect();
            let text = mean_rows(&trace.hidden_states[n_layers - 1], &caption_rows);
            Ok((*label, layer_feats, text))
        })
        .collect();
    let rows = rows?;
    let labels: Vec<u64> = rows.iter().map(|r| r.0).collect();
    let mut text_data = Vec::with_capacity(rows.len() * c);
    for r in &rows {
        text_data.extend_from_slice(&r.2);
    }
    let text = FeatureSet::new(Tensor::new(vec![rows.len(), c], text_data), labels);
    let per_scene: Vec<(u64, Vec<Vec<f64>>)> =
        rows.into_iter().map(|(l, f, _)| (l, f)).collect();
    Ok((feature_sets_from(per_scene, n_layers, c), text))
}

/// Per-layer pooled image features for the understanding task, probed on
/// "<image><query>", plus per-layer pooled reference-caption features from
/// a separate text-only pass through the understanding branch.
pub fn collect_und_features(
    model: &ForkedTransformer,
    scenes: &[(u64, Scene)],
    grids: Option<&[crate::toyworld::GridImage]>,
) -> Result<(Vec<FeatureSet>, Vec<FeatureSet>), ModelError> {
    let vocab = model.vocab();
    let n_layers = model.cfg.total_layers();
    let c = model.cfg.d_model;
    let rows: Result<Vec<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>, ModelError> = scenes
        .par_iter()
        .enumerate()
        .map(|(ix, (label, scene))| {
            // Image pass: BOS <image> query.
            let grid = match grids {
                Some(gs) => gs[ix].clone(),
                None => crate::toyworld::render(scene),
            };
            let mut tokens = vec![SeqToken::Tok(vocab.special(Special::Bos))];
            tokens.push(SeqToken::Tok(vocab.special(Special::ImgStart)));
            for &sym in &grid.cells {
                tokens.push(SeqToken::Cell(sym));
            }
            tokens.push(SeqToken::Tok(vocab.special(Special::ImgEnd)));
            for id in und_query() {
                tokens.push(SeqToken::Tok(id));
            }
            let trace = model.forward(&tokens, Branch::Und)?;
            let cells = positions_of_cells(&tokens);
            let image_feats: Vec<Vec<f64>> =
                trace.hidden_states.iter().map(|h| mean_rows(h, &cells)).collect();

            // Text-only pass over the reference caption.
            let mut text_tokens = vec![SeqToken::Tok(vocab.special(Special::Bos))];
            for id in caption_template(scene) {
                text_tokens.push(SeqToken::Tok(id));
            }
            let text_trace = model.forward(&text_tokens, Branch::Und)?;
            let cap_rows: Vec<usize> = (1..text_tokens.len()).collect();
            let text_feats: Vec<Vec<f64>> = text_trace
                .hidden_states
                .iter()
                .map(|h| mean_rows(h, &cap_rows))
                .collect();
            Ok((*label, image_feats, text_feats))
        })
        .collect();
    let rows = rows?;
    let image: Vec<(u64, Vec<Vec<f64>>)> =
        rows.iter().map(|(l, f, _)| (*l, f.clone())).collect();
    let text: Vec<(u64, Vec<Vec<f64>>)> =
        rows.into_iter().map(|(l, _, t)| (l, t)).collect();
    Ok((
        feature_sets_from(image, n_layers, c),
        feature_sets_from(text, n_layers, c),
    ))
}

/// Alignment curve for one task.
pub fn alignment_curve(
    model: &ForkedTransformer,
    task: ProbeTask,
    scenes: &[(u64, Scene)],
    grids: Option<&[crate::toyworld::GridImage]>,
    cfg: &ProbeConfig,
) -> Result<AlignmentCurve, ModelError> {
    let n_layers = model.cfg.total_layers();
    let scores = match task {
        ProbeTask::Gen => {
            let (layers, text) = collect_gen_features(model, scenes, grids)?;
            (0..n_layers)
                .map(|l| mutual_knn(&layers[l], &text, cfg.k, cfg.metric).expect("probe sizes"))
                .collect()
        }
        ProbeTask::Und => {
            let (layers, text_layers) = collect_und_features(model, scenes, grids)?;
            (0..n_layers)
                .map(|l| {
                    let text = match cfg.text_ref {
                        TextRef::FinalLayer => &text_layers[n_layers - 1],
                        TextRef::PerLayer => &text_layers[l],
                    };
                    mutual_knn(&layers[l], text, cfg.k, cfg.metric).expect("probe sizes")
                })
                .collect()
        }
    };
    Ok(AlignmentCurve { task, scores })
}

// ── Curve shape ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct CurveShape {
    pub spearman_rho: f64,
    /// 1-based layer of the maximum score (first on ties).
    pub argmax_layer: usize,
    pub interior_peak: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &ix in &order[i..=j] {
            ranks[ix] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation of (layer index, score); 0 for degenerate
/// (constant) curves.
pub fn spearman_with_depth(scores: &[f64]) -> f64 {
    let n = scores.len();
    let xr: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
    let yr = average_ranks(scores);
    let mx = xr.iter().sum::<f64>() / n as f64;
    let my = yr.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (xr[i] - mx) * (yr[i] - my);
        vx += (xr[i] - mx) * (xr[i] - mx);
        vy += (yr[i] - my) * (yr[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub const INTERIOR_PEAK_DELTA: f64 = 0.02;

pub fn curve_shape(curve: &AlignmentCurve) -> CurveShape {
    let s = &curve.scores;
    assert!(s.len() >= 3, "curve too short for shape statistics");
    let mut argmax = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[argmax] {
            argmax = i;
        }
    }
    let interior = argmax != 0
        && argmax != s.len() - 1
        && s[argmax] >= s[0] + INTERIOR_PEAK_DELTA
        && s[argmax] >= s[s.len() - 1] + INTERIOR_PEAK_DELTA;
    CurveShape {
        spearman_rho: spearman_with_depth(s),
        argmax_layer: argmax + 1,
        interior_peak: interior,
    }
}

// ── Report emission ──────────────────────────────────────────────────

pub fn write_curves_csv<W: std::io::Write>(
    curves: &[AlignmentCurve],
    b: usize,
    k: usize,
    metric: Metric,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "task,layer,score,B,k,metric")?;
    let metric_name = match metric {
        Metric::Euclidean => "euclidean",
        Metric::Cosine => "cosine",
    };
    for curve in curves {
        let task = match curve.task {
            ProbeTask::Gen => "gen",
            ProbeTask::Und => "und",
        };
        for (l, score) in curve.scores.iter().enumerate() {
            writeln!(w, "{},{},{},{},{},{}", task, l + 1, score, b, k, metric_name)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
pub struct ShapeReport<'a> {
    pub task: ProbeTask,
    pub b: usize,
    pub k: usize,
    pub metric: Metric,
    pub text_ref: TextRef,
    pub shape: CurveShape,
    pub scores: &'a [f64],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn fs(rows: Vec<Vec<f64>>) -> FeatureSet {
        let b = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        FeatureSet::new(Tensor::new(vec![b, c], data), (0..b as u64).collect())
    }

    /// Independent O(B²) oracle: full pairwise distance matrix, full sort,
    /// same tie rule.
    fn brute_force_mutual_knn(a: &FeatureSet, b: &FeatureSet, k: usize, metric: Metric) -> f64 {
        let n = a.len();
        let neigh = |set: &FeatureSet| -> Vec<Vec<usize>> {
            let mut all = Vec::new();
            for i in 0..n {
                let mut pairs: Vec<(f64, usize)> = Vec::new();
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let d = match metric {
                        Metric::Euclidean => set
                            .vectors
                            .row(i)
                            .iter()
                            .zip(set.vectors.row(j))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>(),
                        Metric::Cosine => cosine_distance(set.vectors.row(i), set.vectors.row(j)),
                    };
                    pairs.push((d, j));
                }
                pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
                all.push(pairs.into_iter().take(k).map(|(_, j)| j).collect());
            }
            all
        };
        let na = neigh(a);
        let nb = neigh(b);
        let mut total = 0;
        for i in 0..n {
            for j in &na[i] {
                if nb[i].contains(j) {
                    total += 1;
                }
            }
        }
        total as f64 / (k * n) as f64
    }

    #[test]
    fn identical_sets_score_one() {
        let a = fs(vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0], vec![4.0, 4.0]]);
        for k in 1..4 {
            assert_eq!(mutual_knn(&a, &a, k, Metric::Euclidean).unwrap(), 1.0);
        }
    }

    #[test]
    fn reversed_line_matches_oracle() {
        // B=4, k=1, coords (0,1,2,10) vs list-reversed (10,2,1,0). Sample 1
        // ties between 0 and 2 in the first space (both at distance 1) and
        // the tie rule picks 0, while the second space uniquely picks 2, so
        // the overlap is 3/4 — the brute-force oracle agrees exactly.
        let a = fs(vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0]]);
        let b = fs(vec![vec![10.0], vec![2.0], vec![1.0], vec![0.0]]);
        let oracle = brute_force_mutual_knn(&a, &b, 1, Metric::Euclidean);
        assert_eq!(oracle, 0.75);
        assert_eq!(mutual_knn(&a, &b, 1, Metric::Euclidean).unwrap(), oracle);
        // A true isometry (negated coordinates) does preserve all
        // neighborhoods.
        let neg = fs(vec![vec![-0.0], vec![-1.0], vec![-2.0], vec![-10.0]]);
        assert_eq!(mutual_knn(&a, &neg, 1, Metric::Euclidean).unwrap(), 1.0);
    }

    #[test]
    fn oracle_equivalence_random_instances() {
        let mut rng = substream(200, "test");
        for trial in 0..40 {
            let b = rng.gen_range(12..64);
            let c = rng.gen_range(2..16);
            let k = rng.gen_range(1..(b / 2).min(10).max(2));
            let metric = if trial % 2 == 0 { Metric::Euclidean } else { Metric::Cosine };
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                fs((0..b)
                    .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect())
            };
            let a = mk(&mut rng);
            let bset = mk(&mut rng);
            let ours = mutual_knn(&a, &bset, k, metric).unwrap();
            let oracle = brute_force_mutual_knn(&a, &bset, k, metric);
            assert_eq!(ours, oracle, "trial {trial} b={b} c={c} k={k}");
        }
    }

    #[test]
    fn symmetric_and_transform_invariant() {
        let mut rng = substream(201, "test");
        let a = fs((0..20).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect());
        let b = fs((0..20).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect());
        let ab = mutual_knn(&a, &b, 5, Metric::Euclidean).unwrap();
        let ba = mutual_knn(&b, &a, 5, Metric::Euclidean).unwrap();
        assert_eq!(ab, ba);
        // Uniform positive scaling of one set preserves the score.
        let scaled = FeatureSet::new(
            Tensor::new(
                vec![20, 4],
                a.vectors.data().iter().map(|v| v * 3.5).collect(),
            ),
            a.labels.clone(),
        );
        assert_eq!(mutual_knn(&scaled, &b, 5, Metric::Euclidean).unwrap(), ab);
        // Rotation in the plane of coords (0,1).
        let (s, c) = (0.6f64, 0.8f64);
        let mut rotated = Vec::new();
        for i in 0..20 {
            let r = a.vectors.row(i);
            rotated.extend_from_slice(&[c * r[0] - s * r[1], s * r[0] + c * r[1], r[2], r[3]]);
        }
        let rot = FeatureSet::new(Tensor::new(vec![20, 4], rotated), a.labels.clone());
        assert_eq!(mutual_knn(&rot, &b, 5, Metric::Euclidean).unwrap(), ab);
    }

    #[test]
    fn bad_k_is_rejected() {
        let a = fs(vec![vec![0.0], vec![1.0], vec![2.0]]);
        assert!(mutual_knn(&a, &a, 0, Metric::Euclidean).is_err());
        assert!(mutual_knn(&a, &a, 3, Metric::Euclidean).is_err());
    }

    #[test]
    fn curve_shape_cases() {
        let shape = |scores: Vec<f64>| {
            curve_shape(&AlignmentCurve { task: ProbeTask::Und, scores })
        };
        let monotone = shape(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(monotone.spearman_rho, 1.0);
        assert!(!monotone.interior_peak);
        assert_eq!(monotone.argmax_layer, 4);

        let peaked = shape(vec![0.1, 0.5, 0.4, 0.2]);
        assert_eq!(peaked.argmax_layer, 2);
        assert!(peaked.interior_peak);

        let constant = shape(vec![0.3, 0.3, 0.3]);
        assert_eq!(constant.spearman_rho, 0.0);
        assert!(!constant.interior_peak);
    }

    #[test]
    fn probe_on_untrained_model_is_defined() {
        let cfg = crate::model::ModelConfig {
            d_model: 16,
            n_heads: 2,
            m_shared: 1,
            n_branch: 2,
            text_vocab: 32,
            image_codebook: 64,
            rvq_depth: 2,
            grid_side: 8,
            max_seq_len: 96,
            dropout_prob: 0.0,
        };
        let model = ForkedTransformer::new(cfg, &mut substream(202, "init")).unwrap();
        let mut rng = substream(203, "data");
        let scenes: Vec<(u64, Scene)> = (0..24)
            .map(|i| {
                (
                    i,
                    crate::toyworld::sample_scene(&mut rng, crate::toyworld::Curriculum::Single),
                )
            })
            .collect();
        let pcfg = ProbeConfig { k: 4, b: 24, ..Default::default() };
        for task in [ProbeTask::Gen, ProbeTask::Und] {
            let curve = alignment_curve(&model, task, &scenes, None, &pcfg).unwrap();
            assert_eq!(curve.scores.len(), 3);
            assert!(curve.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
        // Determinism: identical inputs, identical curves.
        let c1 = alignment_curve(&model, ProbeTask::Und, &scenes, None, &pcfg).unwrap();
        let c2 = alignment_curve(&model, ProbeTask::Und, &scenes, None, &pcfg).unwrap();
        assert_eq!(c1.scores, c2.scores);
    }
}
