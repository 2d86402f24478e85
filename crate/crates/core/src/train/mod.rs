//! Training runs: configuration, the step loop with per-layer hooks,
//! metrics, checkpoints, and the multi-seed and continual harnesses.

mod checkpoint;
mod config;
mod harness;
mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{Method, PretrainConfig, TrainConfig};
pub use harness::{
    config_label, run_baseline_suite, run_continual, suite_csv, ContinualResult, SuiteRow,
};
pub use metrics::{
    gini, selection_frequency, selection_frequency_report, subnet_digest, EvalRecord, RunMetrics,
    SelectionEvent, SelectionFrequency, StepRecord, EVAL_HEADER, METRICS_SCHEMA_VERSION,
    STEPS_HEADER,
};

use crate::analysis::eval_metrics;
use crate::autodiff::{forward_backward, LayerGradHook, LinearGrad, SavePolicy, SavedInput};
use crate::error::{Error, Result};
use crate::importance::{ImportanceState, ScoreAccumulator};
use crate::localization::{
    floor_count, output_layer_subnet, random_subnet, select_best, subnet_score, RankFactor,
    Strategy, Subnet,
};
use crate::model::{make_task, Batch, Dataset, Model, TinyDecoder};
use crate::optimizer::{full_grad_path, losia_pro_grad, AdamWConfig, DenseAdamW, SubnetAdamWState};
use crate::params::{LinearId, ParamId, ParamStore};
use crate::schedule::{BaseSchedule, PhaseFlags, ScheduleState};
use crate::tensor::DenseMatrix;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LOSIA_OUT";

/// When a linear layer accumulates, reselects and rewarms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Timing {
    /// Position in the reselection cycle.
    Cycle(usize),
    /// Scored over slot 0, selected once at `t = T`.
    Once,
    /// Never reselected, multiplier 1.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Update {
    Subnet(SubnetAdamWState),
    Dense(DenseAdamW),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerState {
    pub id: LinearId,
    pub name: String,
    pub weight: ParamId,
    pub bias_param: Option<ParamId>,
    pub timing: Timing,
    pub is_head: bool,
    pub update: Update,
    pub bias: Option<DenseAdamW>,
    pub acc: Option<ScoreAccumulator>,
    /// Entries ever inside the active subnet, row-major.
    pub touched: Vec<bool>,
}

impl LayerState {
    fn subnet(&self) -> Option<&Subnet> {
        match &self.update {
            Update::Subnet(s) => Some(&s.subnet),
            Update::Dense(_) => None,
        }
    }

    fn mark(&mut self, cols_total: usize) {
        if let Update::Subnet(s) = &self.update {
            for &r in &s.subnet.rows {
                for &c in &s.subnet.cols {
                    self.touched[r * cols_total + c] = true;
                }
            }
        }
    }
}

/// Result of the frozen-parameter audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub changed: usize,
    /// `(parameter name, row, col)` of entries that changed but were never
    /// trainable.
    pub violations: Vec<(String, usize, usize)>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: TinyDecoder,
    data: Dataset,
    schedule: ScheduleState,
    layers: Vec<LayerState>,
    dense: BTreeMap<ParamId, DenseAdamW>,
    initial: ParamStore,
    t: u64,
    metrics: RunMetrics,
    digest_cache: Option<String>,
    eval_batches: Vec<Batch>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = TinyDecoder::new(cfg.decoder_spec(), cfg.seed)?;
        if let Some(pre) = cfg.pretrain_run() {
            let mut t = Self::with_model(pre, model)?;
            t.run()?;
            model = t.into_model();
        }
        Self::with_model(cfg, model)
    }

    /// A fresh trainer with the seeded initial model, skipping pretraining.
    pub(crate) fn unpretrained(cfg: TrainConfig) -> Result<Self> {
        let model = TinyDecoder::new(cfg.decoder_spec(), cfg.seed)?;
        Self::with_model(cfg, model)
    }

    /// Starts a run from an existing model (continual learning).
    pub fn with_model(cfg: TrainConfig, model: TinyDecoder) -> Result<Self> {
        cfg.validate()?;
        if model.spec() != &cfg.decoder_spec() {
            return Err(Error::config(
                "model shape does not match the configuration",
            ));
        }
        let data = make_task(
            cfg.task,
            cfg.data_seed.unwrap_or(cfg.seed),
            &cfg.task_options(),
        )?;
        if data.seq_len() > cfg.max_seq {
            return Err(Error::config(format!(
                "task sequences of length {} exceed max_seq {}",
                data.seq_len(),
                cfg.max_seq
            )));
        }
        let blocks = model.blocks();
        let periodic_head = cfg.head_is_subnet() && cfg.output_periodic && cfg.method.is_periodic();
        let cycle_len = blocks + usize::from(periodic_head);
        let base = BaseSchedule {
            lr: cfg.lr,
            warmup: cfg.warmup_steps(),
            total: cfg.steps,
            shape: cfg.lr_shape,
        };
        let mut schedule =
            ScheduleState::new(cfg.slot, cycle_len.max(1), cfg.warmup_steps(), base)?;
        schedule.synchronous = cfg.sl;
        schedule.ramp = !cfg.wds_off;

        let hp = cfg.adamw();
        let rank = RankFactor::new(cfg.p, cfg.p_o)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1d7a_93c5_0000_0000);
        let mut layers = Vec::new();
        let mut events = Vec::new();
        for (i, spec) in model.linears().iter().enumerate() {
            let id = LinearId(i);
            let (n, m) = model.params().get(spec.weight).shape();
            let is_head = spec.block.is_none();
            let subnet_layer = cfg.method.is_subnet() && (!is_head || cfg.head_is_subnet());
            let timing = match (cfg.method, subnet_layer, is_head) {
                (_, false, _) => Timing::Fixed,
                (Method::RandomSubnet, _, _) => Timing::Fixed,
                (Method::StaticSubnet, _, _) => Timing::Once,
                (_, true, false) => Timing::Cycle(spec.block.unwrap_or(0)),
                (_, true, true) if periodic_head => Timing::Cycle(blocks),
                _ => Timing::Once,
            };
            let update = if subnet_layer {
                let subnet = if is_head {
                    let b = rank.output_budget(m)?;
                    random_subnet(n, m, n, b, &mut rng)
                } else {
                    let (a, b) = rank
                        .budget(n, m)
                        .map_err(|e| Error::config(format!("{}: {e}", spec.name)))?;
                    random_subnet(n, m, a, b, &mut rng)
                };
                events.push(SelectionEvent {
                    step: 0,
                    linear: i,
                    name: spec.name.clone(),
                    subnet: subnet.clone(),
                    score: 0.0,
                    strategy: "initial".into(),
                    initial: true,
                });
                Update::Subnet(SubnetAdamWState::new(id, subnet, hp))
            } else {
                Update::Dense(DenseAdamW::new(n, m))
            };
            let bias = spec.bias.map(|b| {
                let (r, c) = model.params().get(b).shape();
                DenseAdamW::new(r, c)
            });
            let mut state = LayerState {
                id,
                name: spec.name.clone(),
                weight: spec.weight,
                bias_param: spec.bias,
                timing,
                is_head,
                update,
                bias,
                acc: None,
                touched: vec![!subnet_layer; n * m],
            };
            state.mark(m);
            layers.push(state);
        }

        let mut dense = BTreeMap::new();
        if !cfg.method.is_subnet() {
            let linear_params: Vec<ParamId> = model
                .linears()
                .iter()
                .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
                .collect();
            for (pid, p) in model.params().iter() {
                if !linear_params.contains(&pid) {
                    dense.insert(pid, DenseAdamW::new(p.value.rows(), p.value.cols()));
                }
            }
        }
        let eval_batches = data.eval_batches(cfg.eval_batch_size);
        Ok(Self {
            initial: model.params().clone(),
            cfg,
            model,
            data,
            schedule,
            layers,
            dense,
            t: 0,
            metrics: RunMetrics {
                selections: events,
                ..RunMetrics::default()
            },
            digest_cache: None,
            eval_batches,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TinyDecoder {
        &self.model
    }

    pub fn into_model(self) -> TinyDecoder {
        self.model
    }

    /// Weights at the start of this run (after any pretraining).
    pub fn initial_params(&self) -> &ParamStore {
        &self.initial
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn schedule(&self) -> ScheduleState {
        self.schedule.at(self.t)
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.cfg.steps
    }

    /// Active subnet of every subnet-trained linear layer.
    pub fn subnets(&self) -> Vec<(LinearId, Subnet)> {
        self.layers
            .iter()
            .filter_map(|l| l.subnet().map(|s| (l.id, s.clone())))
            .collect()
    }

    fn flags(&self, sched: &ScheduleState, timing: Timing) -> Result<PhaseFlags> {
        Ok(match timing {
            Timing::Cycle(c) => sched.flags(c)?,
            Timing::Once => sched.once_flags(),
            Timing::Fixed => PhaseFlags::default(),
        })
    }

    fn multiplier(&self, sched: &ScheduleState, timing: Timing) -> Result<f64> {
        Ok(match timing {
            Timing::Cycle(c) => sched.lr_multiplier(c)?,
            Timing::Once => sched.once_multiplier(),
            Timing::Fixed => 1.0,
        })
    }

    fn new_accumulator(&self, layer: &LayerState) -> Result<ScoreAccumulator> {
        let w = self.model.params().get(self.model.linear(layer.id).weight);
        Ok(if self.cfg.gl {
            ScoreAccumulator::GradientMagnitude {
                layer: layer.id,
                mean_abs: DenseMatrix::zeros(w.rows(), w.cols()),
                steps: 0,
            }
        } else {
            ScoreAccumulator::Sensitivity(
                ImportanceState::new(layer.id, w.rows(), w.cols(), self.cfg.beta1, self.cfg.beta2)?
                    .with_reference(self.cfg.deviation()),
            )
        })
    }

    fn reselect(&mut self, idx: usize) -> Result<()> {
        let t = self.t;
        let layer = &mut self.layers[idx];
        let acc = layer.acc.take().ok_or_else(|| {
            Error::State(format!(
                "{} reselects at step {t} without accumulated importance",
                layer.name
            ))
        })?;
        let q = acc.score()?;
        let (subnet, score, strategy) = if layer.is_head {
            let s = output_layer_subnet(&q, self.cfg.p_o)?;
            let score = subnet_score(&q, &s)?;
            (s, score, Strategy::OutputColumns)
        } else {
            let sel = select_best(&q, RankFactor::uniform(self.cfg.p)?)?;
            (sel.subnet, sel.score, sel.strategy)
        };
        let Update::Subnet(state) = &layer.update else {
            return Err(Error::State(format!(
                "{} is not subnet-trained",
                layer.name
            )));
        };
        layer.update = Update::Subnet(state.migrate(subnet.clone(), self.cfg.reset_moments));
        layer.mark(q.cols());
        self.metrics.selections.push(SelectionEvent {
            step: t,
            linear: layer.id.0,
            name: layer.name.clone(),
            subnet,
            score,
            strategy: strategy.to_string(),
            initial: false,
        });
        self.digest_cache = None;
        Ok(())
    }

    fn live_units(&self) -> usize {
        let mut units: Vec<Option<usize>> = self
            .layers
            .iter()
            .filter(|l| l.acc.is_some())
            .map(|l| match l.timing {
                Timing::Cycle(c) => Some(c),
                _ => None,
            })
            .collect();
        units.sort();
        units.dedup();
        units.len()
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<()> {
        let t = self.t;
        let sched = self.schedule.at(t);
        let mut flags = Vec::with_capacity(self.layers.len());
        let mut lrs = Vec::with_capacity(self.layers.len());
        let base_lr = sched.base.lr(t);
        for l in &self.layers {
            flags.push(self.flags(&sched, l.timing)?);
            lrs.push(self.multiplier(&sched, l.timing)? * base_lr);
        }
        for (i, f) in flags.iter().enumerate() {
            if f.reselect {
                self.reselect(i)?;
            }
        }
        for (i, f) in flags.iter().enumerate() {
            if f.accumulate && self.layers[i].acc.is_none() {
                let acc = self.new_accumulator(&self.layers[i])?;
                self.layers[i].acc = Some(acc);
            }
        }
        let live = self.live_units();
        self.metrics.max_live_importance = self.metrics.max_live_importance.max(live);

        let mut policy = SavePolicy::full();
        if self.cfg.method == Method::LosiaPro {
            for (l, f) in self.layers.iter().zip(&flags) {
                if let Some(s) = l.subnet() {
                    let n = self
                        .model
                        .params()
                        .get(self.model.linear(l.id).weight)
                        .rows();
                    if !f.accumulate && s.rows.len() < n {
                        policy.slice(l.id, s.rows.clone());
                    }
                }
            }
        }

        let batch = self
            .data
            .batch_for_step(self.cfg.seed, t, self.cfg.batch_size);
        let hp = self.cfg.adamw();
        let mut hook = StepHook {
            layers: &mut self.layers,
            flags: &flags,
            lrs: &lrs,
            hp,
            step: t,
            macs: 0,
        };
        let out = forward_backward(&mut self.model, &batch, policy, &mut hook, t)?;
        let macs = hook.macs;

        for (pid, state) in self.dense.iter_mut() {
            if let Some(g) = out.param_grads.get(*pid) {
                state.step(self.model.params_mut().get_mut(*pid), g, base_lr, &hp, t)?;
            }
        }

        let (mut act, mut head_act) = (0, 0);
        for (id, bytes) in &out.saved_activation_bytes {
            if self.model.linear(*id).block.is_some() {
                act += bytes;
            } else {
                head_act += bytes;
            }
        }
        let digest = match &self.digest_cache {
            Some(d) => d.clone(),
            None => {
                let d = subnet_digest(
                    self.layers
                        .iter()
                        .filter_map(|l| l.subnet().map(|s| (l.id.0, s))),
                );
                self.digest_cache = Some(d.clone());
                d
            }
        };
        let multipliers = (0..sched.layers)
            .map(|c| sched.lr_multiplier(c))
            .collect::<Result<Vec<_>>>()?;
        self.metrics.steps.push(StepRecord {
            step: t,
            loss: out.loss,
            lr: base_lr,
            multipliers,
            subnet_digest: digest,
            activation_bytes: act,
            head_activation_bytes: head_act,
            macs,
            live_importance: live,
        });
        self.t += 1;
        if self.t % self.cfg.eval_interval() == 0 || self.t == self.cfg.steps {
            self.evaluate()?;
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let (loss, accuracy) = eval_metrics(&self.model, &self.eval_batches)?;
        let sched = self.schedule.at(self.t);
        let rewarming: Vec<String> = (0..sched.layers)
            .filter(|&c| sched.flags(c).map(|f| f.rewarm_window).unwrap_or(false))
            .map(|c| format!("rewarm:{c}"))
            .collect();
        let phase = if self.cfg.method.is_periodic() && !rewarming.is_empty() {
            rewarming.join(" ")
        } else {
            "steady".into()
        };
        self.metrics.evals.push(EvalRecord {
            step: self.t,
            loss,
            accuracy,
            phase,
        });
        Ok(())
    }

    /// Runs until `steps` have completed. On a numeric failure the state is
    /// checkpointed to `failure_dir` (when given) before the error returns.
    pub fn run_with_failure_dir(&mut self, failure_dir: Option<&Path>) -> Result<()> {
        while !self.is_done() {
            if let Err(e) = self.step() {
                if let (Error::NumericOverflow { .. }, Some(dir)) = (&e, failure_dir) {
                    save_checkpoint(self, dir)?;
                }
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with_failure_dir(None)
    }

    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.t < step.min(self.cfg.steps) {
            self.step()?;
        }
        Ok(())
    }

    /// Compares the current weights with those at construction: every
    /// changed entry must have been trainable at some point.
    pub fn audit(&self) -> AuditReport {
        let mut allowed: BTreeMap<ParamId, Option<(&[bool], usize)>> = BTreeMap::new();
        for l in &self.layers {
            let spec = self.model.linear(l.id);
            let cols = self.model.params().get(spec.weight).cols();
            allowed.insert(spec.weight, Some((&l.touched, cols)));
            if let Some(b) = spec.bias {
                allowed.insert(b, None);
            }
        }
        let mut report = AuditReport {
            changed: 0,
            violations: Vec::new(),
        };
        for (pid, p) in self.model.params().iter() {
            let before = self.initial.get(pid);
            let trainable_all = self.dense.contains_key(&pid);
            for r in 0..before.rows() {
                for c in 0..before.cols() {
                    if p.value.get(r, c).to_bits() == before.get(r, c).to_bits() {
                        continue;
                    }
                    report.changed += 1;
                    let ok = trainable_all
                        || match allowed.get(&pid) {
                            Some(None) => true,
                            Some(Some((mask, cols))) => mask[r * cols + c],
                            None => false,
                        };
                    if !ok {
                        report.violations.push((p.name.clone(), r, c));
                    }
                }
            }
        }
        report
    }

    /// Writes metrics CSVs and a JSON summary to `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.steps_csv())?;
        std::fs::write(dir.join("eval.csv"), self.metrics.evals_csv())?;
        std::fs::write(dir.join("selections.csv"), self.metrics.selections_csv())?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml_string()?)?;
        let last = self.metrics.final_eval();
        let summary = serde_json::json!({
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "method": self.cfg.method.to_string(),
            "task": self.cfg.task.to_string(),
            "seed": self.cfg.seed,
            "steps": self.t,
            "final_eval_loss": last.map(|e| e.loss),
            "final_accuracy": last.map(|e| e.accuracy),
            "digest": self.metrics.digest(),
            "max_live_importance": self.metrics.max_live_importance,
            "trainable_scalars": self.trainable_scalars(),
        });
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(())
    }

    /// Scalars updated at a given step: subnet blocks, dense tensors and
    /// biases.
    pub fn trainable_scalars(&self) -> usize {
        let mut total: usize = self.dense.values().map(|d| d.m.len()).sum();
        for l in &self.layers {
            total += match &l.update {
                Update::Subnet(s) => s.m.len(),
                Update::Dense(d) => d.m.len(),
            };
            total += l.bias.as_ref().map_or(0, |b| b.m.len());
        }
        total
    }

    pub(crate) fn parts_mut(&mut self) -> TrainerParts<'_> {
        TrainerParts {
            model: &mut self.model,
            layers: &mut self.layers,
            dense: &mut self.dense,
            initial: &mut self.initial,
            t: &mut self.t,
            metrics: &mut self.metrics,
        }
    }

    pub(crate) fn parts(
        &self,
    ) -> (
        &TinyDecoder,
        &[LayerState],
        &BTreeMap<ParamId, DenseAdamW>,
        &ParamStore,
        u64,
        &RunMetrics,
    ) {
        (
            &self.model,
            &self.layers,
            &self.dense,
            &self.initial,
            self.t,
            &self.metrics,
        )
    }

    pub(crate) fn invalidate_digest(&mut self) {
        self.digest_cache = None;
    }
}

pub(crate) struct TrainerParts<'a> {
    pub model: &'a mut TinyDecoder,
    pub layers: &'a mut Vec<LayerState>,
    pub dense: &'a mut BTreeMap<ParamId, DenseAdamW>,
    pub initial: &'a mut ParamStore,
    pub t: &'a mut u64,
    pub metrics: &'a mut RunMetrics,
}

struct StepHook<'a> {
    layers: &'a mut [LayerState],
    flags: &'a [PhaseFlags],
    lrs: &'a [f64],
    hp: AdamWConfig,
    step: u64,
    macs: u64,
}

impl LayerGradHook for StepHook<'_> {
    fn on_linear(&mut self, grad: LinearGrad<'_>, params: &mut ParamStore) -> Result<()> {
        let i = grad.layer.0;
        let (flags, lr) = (self.flags[i], self.lrs[i]);
        let layer = &mut self.layers[i];
        let spec_weight = layer.weight;
        let name = layer.name.clone();
        fn full_input<'x>(input: &'x SavedInput, name: &str) -> Result<&'x DenseMatrix> {
            match input {
                SavedInput::Full(x) => Ok(x),
                SavedInput::Columns { .. } => Err(Error::State(format!(
                    "{name} needs its full input but only a slice was stored"
                ))),
            }
        }
        match &mut layer.update {
            Update::Dense(state) => {
                let g = full_grad_path(
                    full_input(grad.input, &name)?,
                    grad.upstream,
                    &mut self.macs,
                )?;
                state.step(params.get_mut(spec_weight), &g, lr, &self.hp, self.step)?;
            }
            Update::Subnet(state) => {
                let block = if flags.accumulate {
                    let g = full_grad_path(
                        full_input(grad.input, &name)?,
                        grad.upstream,
                        &mut self.macs,
                    )?;
                    let acc = layer.acc.as_mut().ok_or_else(|| {
                        Error::State(format!("{} accumulates without state", layer.name))
                    })?;
                    acc.observe(&g, params.get(spec_weight))?;
                    g.select_block(&state.subnet.rows, &state.subnet.cols)?
                } else {
                    match grad.input {
                        SavedInput::Columns { x, .. } => {
                            losia_pro_grad(x, grad.upstream, &state.subnet, &mut self.macs)?
                        }
                        SavedInput::Full(x) => {
                            let g = full_grad_path(x, grad.upstream, &mut self.macs)?;
                            g.select_block(&state.subnet.rows, &state.subnet.cols)?
                        }
                    }
                };
                state.fused_step(params.get_mut(spec_weight), &block, lr, self.step)?;
            }
        }
        if let (Some(bstate), Some(bg), Some(bid)) =
            (layer.bias.as_mut(), grad.bias_grad, layer.bias_param)
        {
            bstate.step(params.get_mut(bid), bg, lr, &self.hp, self.step)?;
        }
        Ok(())
    }
}

/// Output directory for a run: the configured one, else `$LOSIA_OUT/<name>`,
/// else `runs/<name>`.
pub fn output_dir(cfg: &TrainConfig, name: &str) -> PathBuf {
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

/// Runs a configuration to completion.
pub fn run_training(cfg: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.run()?;
    Ok(trainer)
}

/// Trainable budget of a decoder layer projection at factor `p`.
pub fn subnet_budget(n: usize, m: usize, p: f64) -> usize {
    floor_count(n, p) * floor_count(m, p)
}
