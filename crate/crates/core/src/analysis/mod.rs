//! Diagnostics: gradient heatmaps, spectral drift, masking robustness, the
//! memory model, continual-learning metrics, and the subnet-update error
//! bound.

mod cl;
mod memory;
mod spectral;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use cl::{cl_metrics, ClMatrix, ClMetrics};
pub use memory::{
    memory_model, round_sig3, Components, MemoryModelInput, MemoryRecord, PeftMethod,
};
pub use spectral::{spectral_drift, top_left_singular, LeftSingular, SpectralDrift, SUBSPACE_TOL};

use crate::autodiff::{evaluate, forward_backward, CollectGrads, SavePolicy};
use crate::error::{Error, Result};
use crate::importance::{grad_score, raw_importance, ImportanceState, DEFAULT_BETA};
use crate::localization::{floor_count, select_best, RankFactor, Subnet};
use crate::model::{token_accuracy, Batch, Model};
use crate::params::LinearId;
use crate::tensor::DenseMatrix;

/// Mean loss (weighted by counted targets) and accuracy over `batches`.
pub fn eval_metrics(model: &dyn Model, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss, mut hits, mut total) = (0.0, 0usize, 0usize);
    for b in batches {
        let (l, logits) = evaluate(model, b)?;
        let (h, t) = token_accuracy(&logits, b);
        loss += l * t as f64;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::config("evaluation set has no counted targets"));
    }
    Ok((loss / total as f64, hits as f64 / total as f64))
}

/// `|∇W|` of one layer with its row and column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: LinearId,
    pub abs: DenseMatrix,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
}

impl Heatmap {
    /// Long format: `row,col,abs_grad`.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("row,col,abs_grad\n");
        for r in 0..self.abs.rows() {
            for c in 0..self.abs.cols() {
                out.push_str(&format!("{r},{c},{}\n", self.abs.get(r, c)));
            }
        }
        out
    }

    /// `axis,index,sum` for both margins.
    pub fn margins_csv(&self) -> String {
        let mut out = String::from("axis,index,sum\n");
        for (i, s) in self.row_sums.iter().enumerate() {
            out.push_str(&format!("row,{i},{s}\n"));
        }
        for (i, s) in self.col_sums.iter().enumerate() {
            out.push_str(&format!("col,{i},{s}\n"));
        }
        out
    }

    /// Share of total mass in the `k` heaviest rows.
    pub fn top_row_share(&self, k: usize) -> f64 {
        let total: f64 = self.row_sums.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut sorted = self.row_sums.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted.iter().take(k).sum::<f64>() / total
    }
}

pub fn grad_heatmap(model: &mut dyn Model, batch: &Batch, layer: LinearId) -> Result<Heatmap> {
    if layer.0 >= model.linears().len() {
        return Err(Error::Index {
            what: "linear layer",
            index: layer.0,
            len: model.linears().len(),
        });
    }
    let mut hook = CollectGrads::new();
    forward_backward(model, batch, SavePolicy::full(), &mut hook, 0)?;
    let abs = grad_score(&hook.weight[&layer]);
    Ok(Heatmap {
        layer,
        row_sums: abs.row_sums(),
        col_sums: abs.col_sums(),
        abs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Gradient,
    Sensitivity,
}

impl std::str::FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(ScoreSource::Gradient),
            "sensitivity" => Ok(ScoreSource::Sensitivity),
            other => Err(Error::config(format!("unknown score source '{other}'"))),
        }
    }
}

/// Scores of `layers` accumulated over `batches` without touching the
/// weights: the mean of `|g|`, or the smoothed sensitivity times uncertainty.
pub fn layer_scores(
    model: &mut dyn Model,
    batches: &[Batch],
    layers: &[LinearId],
    source: ScoreSource,
) -> Result<HashMap<LinearId, DenseMatrix>> {
    let mut sums: HashMap<LinearId, DenseMatrix> = HashMap::new();
    let mut states: HashMap<LinearId, ImportanceState> = HashMap::new();
    for batch in batches {
        let mut hook = CollectGrads::new();
        forward_backward(model, batch, SavePolicy::full(), &mut hook, 0)?;
        for &id in layers {
            let g = &hook.weight[&id];
            match source {
                ScoreSource::Gradient => {
                    let abs = grad_score(g);
                    match sums.get_mut(&id) {
                        Some(acc) => acc.add_assign(&abs)?,
                        None => {
                            sums.insert(id, abs);
                        }
                    }
                }
                ScoreSource::Sensitivity => {
                    let w = model.params().get(model.linear(id).weight);
                    let state = match states.get_mut(&id) {
                        Some(s) => s,
                        None => states.entry(id).or_insert(ImportanceState::new(
                            id,
                            w.rows(),
                            w.cols(),
                            DEFAULT_BETA,
                            DEFAULT_BETA,
                        )?),
                    };
                    state.ema_update(&raw_importance(g, w)?)?;
                }
            }
        }
    }
    let n = batches.len().max(1) as f64;
    match source {
        ScoreSource::Gradient => Ok(sums
            .into_iter()
            .map(|(k, v)| (k, v.scale(1.0 / n)))
            .collect()),
        ScoreSource::Sensitivity => states
            .into_iter()
            .map(|(k, s)| Ok((k, s.score()?)))
            .collect(),
    }
}

/// Keeps, in every scored layer, the subnet of side fraction
/// `√(1 − mask_pct)` chosen from its score (so about `1 − mask_pct` of the
/// entries survive) and zeroes everything else. A side that floors to zero
/// zeroes the whole weight.
pub fn apply_mask(
    model: &mut dyn Model,
    scores: &HashMap<LinearId, DenseMatrix>,
    mask_pct: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&mask_pct) {
        return Err(Error::config(format!(
            "mask_pct must lie in [0, 1), got {mask_pct}"
        )));
    }
    let keep = (1.0 - mask_pct).sqrt();
    let mut ids: Vec<&LinearId> = scores.keys().collect();
    ids.sort();
    for id in ids {
        let q = &scores[id];
        let (n, m) = q.shape();
        let kept = if floor_count(n, keep) == 0 || floor_count(m, keep) == 0 {
            None
        } else {
            Some(select_best(q, RankFactor::uniform(keep)?)?.subnet)
        };
        let wid = model.linear(*id).weight;
        let w = model.params_mut().get_mut(wid);
        for r in 0..n {
            for c in 0..m {
                if !kept.as_ref().is_some_and(|s: &Subnet| s.contains(r, c)) {
                    w.set(r, c, 0.0);
                }
            }
        }
    }
    Ok(())
}

/// Accuracy of a masked copy of `model` on `eval`.
pub fn mask_and_eval<M: Model + Clone>(
    model: &M,
    scores: &HashMap<LinearId, DenseMatrix>,
    mask_pct: f64,
    eval: &[Batch],
) -> Result<f64> {
    let mut masked = model.clone();
    apply_mask(&mut masked, scores, mask_pct)?;
    Ok(eval_metrics(&masked, eval)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseBound {
    pub mse: f64,
    pub bound: f64,
    pub holds: bool,
}

/// One SGD step of rate `eta` on `layer`, once on the whole weight and once
/// restricted to `subnet`; compares the mean squared output difference on
/// the layer's own input with `η²·‖G outside the subnet‖²·‖x‖² / M`.
pub fn mse_bound_check(
    model: &mut dyn Model,
    batch: &Batch,
    layer: LinearId,
    subnet: &Subnet,
    eta: f64,
) -> Result<MseBound> {
    let mut hook = CollectGrads::keeping_inputs();
    forward_backward(model, batch, SavePolicy::full(), &mut hook, 0)?;
    let (g, x) = (&hook.weight[&layer], &hook.inputs[&layer]);
    let w = model.params().get(model.linear(layer).weight);
    subnet.validate(w.rows(), w.cols())?;
    let full = w.zip_map(g, |w, g| w - eta * g)?;
    let mut sub = w.clone();
    let mut outside = 0.0;
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            if subnet.contains(r, c) {
                sub.set(r, c, w.get(r, c) - eta * g.get(r, c));
            } else {
                outside += g.get(r, c).powi(2);
            }
        }
    }
    let rows = x.rows() as f64;
    let mse = x.matmul(&full)?.sub(&x.matmul(&sub)?)?.frobenius_sq() / rows;
    let bound = eta * eta * outside * x.frobenius_sq() / rows;
    Ok(MseBound {
        mse,
        bound,
        holds: mse <= bound + 1e-12,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub checked: usize,
    pub violations: usize,
}

/// Scans a grid of previous moments and gradients; wherever the current
/// moments satisfy `M > 0` and `G < (1−β1)V / ((1−β2)M)`, the normalized
/// update `M/√V` must not decrease as `G` grows by a small step.
pub fn adamw_monotonicity_check(beta1: f64, beta2: f64) -> MonotonicityReport {
    let grid = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect()
    };
    let normalized = |m_prev: f64, v_prev: f64, g: f64| {
        let m = beta1 * m_prev + (1.0 - beta1) * g;
        let v = beta2 * v_prev + (1.0 - beta2) * g * g;
        (m, v, m / v.sqrt())
    };
    let mut report = MonotonicityReport {
        checked: 0,
        violations: 0,
    };
    let ms: Vec<f64> = grid(1e-3, 10.0, 15)
        .into_iter()
        .flat_map(|m| [m, -m])
        .collect();
    for &m_prev in &ms {
        for &v_prev in &grid(1e-4, 100.0, 15) {
            for &g_mag in &grid(1e-4, 1e3, 40) {
                for g in [g_mag, -g_mag] {
                    let (m, v, u) = normalized(m_prev, v_prev, g);
                    if !(m > 0.0 && g < (1.0 - beta1) * v / ((1.0 - beta2) * m)) {
                        continue;
                    }
                    let h = 1e-7 * g.abs().max(1e-3);
                    let (_, _, u_next) = normalized(m_prev, v_prev, g + h);
                    report.checked += 1;
                    if u_next.abs() < u.abs() - 1e-12 * u.abs().max(1.0) {
                        report.violations += 1;
                    }
                }
            }
        }
    }
    report
}
