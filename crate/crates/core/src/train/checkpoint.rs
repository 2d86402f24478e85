//! Checkpoints: a JSON manifest plus one raw little-endian `f64` file per
//! tensor. Reloading reproduces the trainer state bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerState, RunMetrics, TrainConfig, Trainer, Update};
use crate::error::{Error, Result};
use crate::importance::{ImportanceState, ScoreAccumulator};
use crate::localization::Subnet;
use crate::model::Model;
use crate::optimizer::{DenseAdamW, SubnetAdamWState};
use crate::params::{LinearId, ParamId};
use crate::tensor::DenseMatrix;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "losia-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AccManifest {
    Sensitivity {
        beta1: f64,
        beta2: f64,
        steps: u64,
        reference: crate::importance::DeviationReference,
    },
    GradientMagnitude {
        steps: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerManifest {
    linear: usize,
    subnet: Option<Subnet>,
    counts: Vec<u64>,
    dense_count: Option<u64>,
    bias_count: Option<u64>,
    acc: Option<AccManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    layers: Vec<LayerManifest>,
    dense_counts: BTreeMap<usize, u64>,
    metrics: RunMetrics,
}

struct Writer<'a> {
    dir: &'a Path,
    entries: Vec<TensorEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, m: &DenseMatrix) -> Result<()> {
        let file = format!("{:04}.bin", self.entries.len());
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(self.dir.join(&file), bytes)?;
        self.entries.push(TensorEntry {
            name,
            file,
            rows: m.rows(),
            cols: m.cols(),
        });
        Ok(())
    }
}

struct Reader<'a> {
    dir: &'a Path,
    entries: BTreeMap<String, TensorEntry>,
}

impl Reader<'_> {
    fn get(&self, name: &str) -> Result<DenseMatrix> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks tensor {name}")))?;
        let bytes = std::fs::read(self.dir.join(&e.file))?;
        if bytes.len() != e.rows * e.cols * 8 {
            return Err(Error::Parse(format!(
                "tensor {name}: {} bytes for a {} x {} matrix",
                bytes.len(),
                e.rows,
                e.cols
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        DenseMatrix::new(e.rows, e.cols, data)
    }
}

fn bool_matrix(mask: &[bool], cols: usize) -> Result<DenseMatrix> {
    let data: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    DenseMatrix::new(data.len() / cols.max(1), cols, data)
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (model, layers, dense, initial, t, metrics) = trainer.parts();
    let mut w = Writer {
        dir,
        entries: Vec::new(),
    };
    for (pid, p) in model.params().iter() {
        w.put(format!("param.{}", pid.0), &p.value)?;
        w.put(format!("initial.{}", pid.0), initial.get(pid))?;
    }
    let mut layer_manifests = Vec::new();
    for l in layers {
        let k = l.id.0;
        let cols = model.params().get(l.weight).cols();
        w.put(
            format!("layer.{k}.touched"),
            &bool_matrix(&l.touched, cols)?,
        )?;
        let (subnet, counts, dense_count) = match &l.update {
            Update::Subnet(s) => {
                w.put(format!("layer.{k}.m"), &s.m)?;
                w.put(format!("layer.{k}.v"), &s.v)?;
                (Some(s.subnet.clone()), s.counts.clone(), None)
            }
            Update::Dense(d) => {
                w.put(format!("layer.{k}.m"), &d.m)?;
                w.put(format!("layer.{k}.v"), &d.v)?;
                (None, Vec::new(), Some(d.count))
            }
        };
        if let Some(b) = &l.bias {
            w.put(format!("layer.{k}.bias.m"), &b.m)?;
            w.put(format!("layer.{k}.bias.v"), &b.v)?;
        }
        let acc = match &l.acc {
            None => None,
            Some(ScoreAccumulator::Sensitivity(s)) => {
                w.put(format!("layer.{k}.acc.a"), &s.sensitivity)?;
                w.put(format!("layer.{k}.acc.b"), &s.uncertainty)?;
                Some(AccManifest::Sensitivity {
                    beta1: s.beta1,
                    beta2: s.beta2,
                    steps: s.steps,
                    reference: s.reference,
                })
            }
            Some(ScoreAccumulator::GradientMagnitude {
                mean_abs, steps, ..
            }) => {
                w.put(format!("layer.{k}.acc.a"), mean_abs)?;
                Some(AccManifest::GradientMagnitude { steps: *steps })
            }
        };
        layer_manifests.push(LayerManifest {
            linear: k,
            subnet,
            counts,
            dense_count,
            bias_count: l.bias.as_ref().map(|b| b.count),
            acc,
        });
    }
    let mut dense_counts = BTreeMap::new();
    for (pid, d) in dense {
        w.put(format!("dense.{}.m", pid.0), &d.m)?;
        w.put(format!("dense.{}.v", pid.0), &d.v)?;
        dense_counts.insert(pid.0, d.count);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: t,
        config: trainer.config().clone(),
        tensors: w.entries,
        layers: layer_manifests,
        dense_counts,
        metrics: metrics.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Rebuilds a trainer from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let reader = Reader {
        dir,
        entries: manifest
            .tensors
            .iter()
            .map(|e| (e.name.clone(), e.clone()))
            .collect(),
    };
    let mut trainer = Trainer::unpretrained(manifest.config.clone())?;
    {
        let parts = trainer.parts_mut();
        let ids: Vec<ParamId> = parts.model.params().ids().collect();
        for pid in ids {
            let v = reader.get(&format!("param.{}", pid.0))?;
            parts
                .model
                .params()
                .get(pid)
                .ensure_same_shape(&v, "checkpoint parameter")?;
            *parts.model.params_mut().get_mut(pid) = v;
            *parts.initial.get_mut(pid) = reader.get(&format!("initial.{}", pid.0))?;
        }
        if manifest.layers.len() != parts.layers.len() {
            return Err(Error::Parse(
                "checkpoint layer count differs from the model".into(),
            ));
        }
        for (l, lm) in parts.layers.iter_mut().zip(&manifest.layers) {
            restore_layer(l, lm, &reader)?;
        }
        for (pid, d) in parts.dense.iter_mut() {
            d.m = reader.get(&format!("dense.{}.m", pid.0))?;
            d.v = reader.get(&format!("dense.{}.v", pid.0))?;
            d.count = *manifest.dense_counts.get(&pid.0).ok_or_else(|| {
                Error::Parse(format!("missing count for dense parameter {}", pid.0))
            })?;
        }
        *parts.t = manifest.step;
        *parts.metrics = manifest.metrics;
    }
    trainer.invalidate_digest();
    Ok(trainer)
}

fn restore_layer(l: &mut LayerState, lm: &LayerManifest, reader: &Reader<'_>) -> Result<()> {
    let k = lm.linear;
    if l.id != LinearId(k) {
        return Err(Error::Parse(format!("layer order mismatch at linear {k}")));
    }
    l.touched = reader
        .get(&format!("layer.{k}.touched"))?
        .data()
        .iter()
        .map(|&v| v != 0.0)
        .collect();
    let (m, v) = (
        reader.get(&format!("layer.{k}.m"))?,
        reader.get(&format!("layer.{k}.v"))?,
    );
    match (&mut l.update, &lm.subnet, lm.dense_count) {
        (Update::Subnet(s), Some(subnet), _) => {
            let mut next = SubnetAdamWState::new(l.id, subnet.clone(), s.hp);
            next.m = m;
            next.v = v;
            next.counts = lm.counts.clone();
            *s = next;
        }
        (Update::Dense(d), None, Some(count)) => {
            *d = DenseAdamW { m, v, count };
        }
        _ => {
            return Err(Error::Parse(format!(
                "layer {k}: update kind differs from the configuration"
            )))
        }
    }
    if let Some(b) = l.bias.as_mut() {
        b.m = reader.get(&format!("layer.{k}.bias.m"))?;
        b.v = reader.get(&format!("layer.{k}.bias.v"))?;
        b.count = lm.bias_count.unwrap_or(0);
    }
    l.acc = match &lm.acc {
        None => None,
        Some(AccManifest::Sensitivity {
            beta1,
            beta2,
            steps,
            reference,
        }) => {
            let a = reader.get(&format!("layer.{k}.acc.a"))?;
            let mut s = ImportanceState::new(l.id, a.rows(), a.cols(), *beta1, *beta2)?
                .with_reference(*reference);
            s.sensitivity = a;
            s.uncertainty = reader.get(&format!("layer.{k}.acc.b"))?;
            s.steps = *steps;
            Some(ScoreAccumulator::Sensitivity(s))
        }
        Some(AccManifest::GradientMagnitude { steps }) => {
            Some(ScoreAccumulator::GradientMagnitude {
                layer: l.id,
                mean_abs: reader.get(&format!("layer.{k}.acc.a"))?,
                steps: *steps,
            })
        }
    };
    Ok(())
}
