//! Central finite-difference verification of analytic gradients.
//!
//! The checker never touches backward rules: it re-evaluates the loss with
//! single coordinates perturbed by ±step and compares the quotient against
//! the analytic gradient. Coordinates are strided deterministically per
//! tensor and capped both per tensor and globally.

use rayon::prelude::*;

use crate::graph::{Grads, ParamStore};

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.tensors.iter().all(|t| t.passed == t.checked)
    }

    pub fn total_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

/// Gradients whose analytic and numeric values are both below this are
/// beneath finite-difference resolution and auto-pass.
const ABS_FLOOR: f64 = 1e-7;

pub fn finite_diff_check<F>(
    params: &ParamStore,
    grads: &Grads,
    loss: F,
    budget: usize,
    per_tensor_cap: usize,
    step: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64 + Sync,
{
    // Plan coordinates: an even share of the budget per tensor, strided
    // across each tensor so every region gets sampled.
    let n_tensors = params.len().max(1);
    let share = (budget / n_tensors).max(1).min(per_tensor_cap);
    let mut tasks: Vec<(usize, usize, f64)> = Vec::new();
    for (pix, (_, t)) in params.iter().enumerate() {
        let n = t.numel();
        let count = n.min(share);
        let stride = (n / count).max(1);
        let g = grads.get(crate::graph::ParamId(pix));
        for c in 0..count {
            let idx = c * stride;
            let analytic = g.map_or(0.0, |gt| gt.data()[idx]);
            tasks.push((pix, idx, analytic));
        }
    }

    let chunk = tasks.len().div_ceil(rayon::current_num_threads().max(1));
    let results: Vec<Vec<(usize, f64, f64)>> = tasks
        .par_chunks(chunk.max(1))
        .map(|chunk_tasks| {
            let mut local = params.clone();
            chunk_tasks
                .iter()
                .map(|&(pix, idx, analytic)| {
                    let id = crate::graph::ParamId(pix);
                    let orig = local.tensor(id).data()[idx];
                    local.tensor_mut(id).data_mut()[idx] = orig + step;
                    let lp = loss(&local);
                    local.tensor_mut(id).data_mut()[idx] = orig - step;
                    let lm = loss(&local);
                    local.tensor_mut(id).data_mut()[idx] = orig;
                    (pix, analytic, (lp - lm) / (2.0 * step))
                })
                .collect()
        })
        .collect();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut tensors: Vec<TensorCheck> = names
        .into_iter()
        .map(|name| TensorCheck { name, checked: 0, passed: 0, max_rel_err: 0.0 })
        .collect();
    for (pix, analytic, numeric) in results.into_iter().flatten() {
        let t = &mut tensors[pix];
        t.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        if scale < ABS_FLOOR {
            t.passed += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        t.max_rel_err = t.max_rel_err.max(rel);
        if rel < tol {
            t.passed += 1;
        }
    }
    GradCheckReport { tensors, tol, step }
}
