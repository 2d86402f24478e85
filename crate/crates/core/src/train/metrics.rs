use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::localization::Subnet;

/// Version of the metrics CSV layout written by [`RunMetrics::steps_csv`].
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const STEPS_HEADER: &str =
    "step,loss,lr,multipliers,subnet_digest,activation_bytes,head_activation_bytes,macs,live_importance";
pub const EVAL_HEADER: &str = "step,eval_loss,accuracy,phase";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Base learning rate `lr(t)`.
    pub lr: f64,
    /// Rewarm multiplier of each scheduled layer.
    pub multipliers: Vec<f64>,
    pub subnet_digest: String,
    /// Stored input-activation bytes of the decoder-layer projections.
    pub activation_bytes: usize,
    pub head_activation_bytes: usize,
    /// Multiply-adds spent forming weight gradients.
    pub macs: u64,
    /// Scheduled layers holding importance state during the step.
    pub live_importance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Steps completed when evaluated.
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Which layer (if any) was mid-rewarm.
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub step: u64,
    pub linear: usize,
    pub name: String,
    pub subnet: Subnet,
    pub score: f64,
    pub strategy: String,
    /// The cold-start subnet chosen before any scoring.
    pub initial: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub selections: Vec<SelectionEvent>,
    pub max_live_importance: usize,
}

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

/// Short hex digest of a set of subnets.
pub fn subnet_digest<'a>(subnets: impl Iterator<Item = (usize, &'a Subnet)>) -> String {
    let mut h = Sha256::new();
    for (id, s) in subnets {
        h.update(format!("{id}:{:?}/{:?};", s.rows, s.cols).as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

impl RunMetrics {
    /// SHA-256 over every record with floats taken bit-for-bit.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.steps {
            let mults: Vec<String> = r.multipliers.iter().map(|&m| bits(m)).collect();
            h.update(
                format!(
                    "s{},{},{},{},{},{},{},{},{}\n",
                    r.step,
                    bits(r.loss),
                    bits(r.lr),
                    mults.join(";"),
                    r.subnet_digest,
                    r.activation_bytes,
                    r.head_activation_bytes,
                    r.macs,
                    r.live_importance
                )
                .as_bytes(),
            );
        }
        for e in &self.evals {
            h.update(
                format!(
                    "e{},{},{},{}\n",
                    e.step,
                    bits(e.loss),
                    bits(e.accuracy),
                    e.phase
                )
                .as_bytes(),
            );
        }
        for s in &self.selections {
            h.update(
                format!(
                    "x{},{},{:?},{:?},{},{},{}\n",
                    s.step,
                    s.linear,
                    s.subnet.rows,
                    s.subnet.cols,
                    bits(s.score),
                    s.strategy,
                    s.initial
                )
                .as_bytes(),
            );
        }
        hex::encode(h.finalize())
    }

    pub fn steps_csv(&self) -> String {
        let mut out = format!("{STEPS_HEADER}\n");
        for r in &self.steps {
            let mults: Vec<String> = r.multipliers.iter().map(|m| m.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.loss,
                r.lr,
                mults.join(";"),
                r.subnet_digest,
                r.activation_bytes,
                r.head_activation_bytes,
                r.macs,
                r.live_importance
            ));
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for e in &self.evals {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.step, e.loss, e.accuracy, e.phase
            ));
        }
        out
    }

    pub fn selections_csv(&self) -> String {
        let mut out = String::from("step,linear,name,rows,cols,score,strategy,initial\n");
        for s in &self.selections {
            let join = |v: &[usize]| {
                v.iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.step,
                s.linear,
                s.name,
                join(&s.subnet.rows),
                join(&s.subnet.cols),
                s.score,
                s.strategy,
                s.initial
            ));
        }
        out
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Per-neuron selection counts of one linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFrequency {
    pub linear: usize,
    pub name: String,
    pub events: usize,
    pub row_counts: BTreeMap<usize, usize>,
    pub col_counts: BTreeMap<usize, usize>,
}

impl SelectionFrequency {
    /// Gini coefficient of the row counts over all rows ever selected.
    pub fn row_gini(&self) -> f64 {
        gini(&self.row_counts.values().copied().collect::<Vec<_>>())
    }
}

pub fn gini(counts: &[usize]) -> f64 {
    let n = counts.len();
    let total: usize = counts.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (i + 1) as f64 * c as f64)
        .sum();
    (2.0 * weighted) / (n as f64 * total as f64) - (n as f64 + 1.0) / n as f64
}

/// Counts how often each neuron was selected. Scored reselections are used
/// where a layer has any; layers that never reselect report their initial
/// subnet.
pub fn selection_frequency(metrics: &RunMetrics) -> Vec<SelectionFrequency> {
    let mut by_linear: BTreeMap<usize, Vec<&SelectionEvent>> = BTreeMap::new();
    for e in &metrics.selections {
        by_linear.entry(e.linear).or_default().push(e);
    }
    by_linear
        .into_iter()
        .map(|(linear, events)| {
            let scored: Vec<&SelectionEvent> =
                events.iter().copied().filter(|e| !e.initial).collect();
            let used = if scored.is_empty() { events } else { scored };
            let mut row_counts = BTreeMap::new();
            let mut col_counts = BTreeMap::new();
            for e in &used {
                for &r in &e.subnet.rows {
                    *row_counts.entry(r).or_insert(0) += 1;
                }
                for &c in &e.subnet.cols {
                    *col_counts.entry(c).or_insert(0) += 1;
                }
            }
            SelectionFrequency {
                linear,
                name: used[0].name.clone(),
                events: used.len(),
                row_counts,
                col_counts,
            }
        })
        .collect()
}

/// CSV of per-neuron counts plus the rank of each count in its layer's
/// descending frequency curve.
pub fn selection_frequency_report(metrics: &RunMetrics) -> String {
    let mut out = String::from("linear,name,axis,neuron,count,rank\n");
    for f in selection_frequency(metrics) {
        for (axis, counts) in [("row", &f.row_counts), ("col", &f.col_counts)] {
            let mut sorted: Vec<(usize, usize)> = counts.iter().map(|(&k, &v)| (k, v)).collect();
            sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            for (rank, (neuron, count)) in sorted.into_iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{axis},{neuron},{count},{rank}\n",
                    f.linear, f.name
                ));
            }
        }
    }
    out
}
