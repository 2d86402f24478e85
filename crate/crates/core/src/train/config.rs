use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{DeviationReference, DEFAULT_BETA};
use crate::model::{DecoderSpec, TaskKind, TaskOptions};
use crate::optimizer::AdamWConfig;
use crate::schedule::LrShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Every parameter trained with dense AdamW.
    Fft,
    /// Subnets reselected asynchronously; weight gradients formed in full and
    /// then sliced.
    Losia,
    /// As `Losia`, but layers outside their accumulation slot keep only the
    /// selected input columns and form the gradient block directly.
    LosiaPro,
    /// Importance gathered for every layer over the first slot, one
    /// selection, then fixed.
    StaticSubnet,
    /// A seeded uniformly random subnet fixed for the whole run.
    RandomSubnet,
}

impl Method {
    pub fn is_subnet(&self) -> bool {
        !matches!(self, Method::Fft)
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Method::Losia | Method::LosiaPro)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fft" => Ok(Method::Fft),
            "losia" => Ok(Method::Losia),
            "losia_pro" => Ok(Method::LosiaPro),
            "static_subnet" => Ok(Method::StaticSubnet),
            "random_subnet" => Ok(Method::RandomSubnet),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fft => "fft",
            Method::Losia => "losia",
            Method::LosiaPro => "losia_pro",
            Method::StaticSubnet => "static_subnet",
            Method::RandomSubnet => "random_subnet",
        })
    }
}

/// Dense warm-start run performed before the main run. Shares the model
/// shape, vocabulary, batch size and data seed of the enclosing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub task: TaskKind,
    pub add_coeff: usize,
    pub add_offset: usize,
    pub train_fraction: f64,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ModularAdd,
            add_coeff: 1,
            add_offset: 0,
            train_fraction: 0.9,
            steps: 2000,
            lr: 3e-3,
            weight_decay: 1.0,
        }
    }
}

/// Run configuration. Read from a flat TOML table whose keys are the field
/// names below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub train_fraction: f64,
    pub corpus: Option<PathBuf>,
    pub add_coeff: usize,
    pub add_offset: usize,
    /// Seed of the dataset; defaults to the run seed.
    pub data_seed: Option<u64>,

    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,

    pub method: Method,
    /// Reselect every layer at every slot boundary.
    pub sl: bool,
    /// Score by mean absolute gradient instead of sensitivity × uncertainty.
    pub gl: bool,
    /// No learning-rate ramp after reselection.
    pub wds_off: bool,
    /// Train the whole output head densely.
    pub ffto: bool,
    /// Drop optimizer moments at every reselection.
    pub reset_moments: bool,
    /// Reselect the output head in the cycle; otherwise once at the end of
    /// the first slot.
    pub output_periodic: bool,
    pub post_update_deviation: bool,

    pub p: f64,
    pub p_o: f64,
    /// Steps per slot, `T`.
    pub slot: u64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,

    pub lr: f64,
    pub lr_shape: LrShape,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between evaluations; defaults to `slot`.
    pub eval_every: Option<u64>,
    pub eval_batch_size: usize,
    pub output_dir: Option<PathBuf>,
    /// Optional dense pretraining; a `[pretrain]` table in TOML.
    pub pretrain: Option<PretrainConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ModularAdd,
            vocab: 17,
            seq_len: 4,
            train_size: 512,
            eval_size: 128,
            train_fraction: 0.8,
            corpus: None,
            add_coeff: 1,
            add_offset: 0,
            data_seed: None,
            layers: 2,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            max_seq: 16,
            method: Method::Losia,
            sl: false,
            gl: false,
            wds_off: false,
            ffto: false,
            reset_moments: false,
            output_periodic: true,
            post_update_deviation: false,
            p: 0.125,
            p_o: 1.0,
            slot: 20,
            warmup_ratio: 0.1,
            beta1: DEFAULT_BETA,
            beta2: DEFAULT_BETA,
            lr: 1e-3,
            lr_shape: LrShape::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            steps: 200,
            batch_size: 16,
            seed: 0,
            eval_every: None,
            eval_batch_size: 64,
            output_dir: None,
            pretrain: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let subnet_only = [("sl", self.sl), ("gl", self.gl), ("wds_off", self.wds_off)];
        if !self.method.is_periodic() {
            if let Some((name, _)) = subnet_only.iter().find(|(_, on)| *on) {
                return Err(Error::config(format!(
                    "flag {name} applies to losia and losia_pro only, not {}",
                    self.method
                )));
            }
        }
        if !self.method.is_subnet() && (self.ffto || self.reset_moments) {
            return Err(Error::config("ffto and reset_moments need a subnet method"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) || !(self.p_o > 0.0 && self.p_o <= 1.0) {
            return Err(Error::config(format!(
                "p = {} and p_o = {} must lie in (0, 1]",
                self.p, self.p_o
            )));
        }
        if self.slot == 0 || self.steps == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config(
                "slot, steps, batch_size and eval_batch_size must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio must lie in [0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        self.adamw().validate()?;
        if let Some(pre) = &self.pretrain {
            self.pretrain_config(pre).validate()?;
        }
        self.decoder_spec().validate()
    }

    /// The full configuration of the pretraining run, if any.
    pub fn pretrain_run(&self) -> Option<TrainConfig> {
        self.pretrain.as_ref().map(|pre| self.pretrain_config(pre))
    }

    fn pretrain_config(&self, pre: &PretrainConfig) -> TrainConfig {
        TrainConfig {
            task: pre.task,
            add_coeff: pre.add_coeff,
            add_offset: pre.add_offset,
            train_fraction: pre.train_fraction,
            method: Method::Fft,
            sl: false,
            gl: false,
            wds_off: false,
            ffto: false,
            reset_moments: false,
            steps: pre.steps,
            lr: pre.lr,
            weight_decay: pre.weight_decay,
            data_seed: Some(self.data_seed.unwrap_or(self.seed)),
            output_dir: None,
            pretrain: None,
            ..self.clone()
        }
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        DecoderSpec {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            vocab: self.vocab,
            max_seq: self.max_seq,
        }
    }

    pub fn task_options(&self) -> TaskOptions {
        TaskOptions {
            vocab: self.vocab,
            seq_len: self.seq_len,
            train_size: self.train_size,
            eval_size: self.eval_size,
            train_fraction: self.train_fraction,
            corpus: self.corpus.clone(),
            add_coeff: self.add_coeff,
            add_offset: self.add_offset,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn deviation(&self) -> DeviationReference {
        if self.post_update_deviation {
            DeviationReference::PostUpdate
        } else {
            DeviationReference::PreUpdate
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.steps as f64 * self.warmup_ratio).floor() as u64
    }

    pub fn eval_interval(&self) -> u64 {
        self.eval_every.unwrap_or(self.slot)
    }

    /// Whether the output head is trained as a column subnet.
    pub fn head_is_subnet(&self) -> bool {
        self.method.is_subnet() && !self.ffto && self.p_o < 1.0
    }
}
