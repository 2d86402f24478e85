//! Asynchronous per-layer localization timeline.
//!
//! Time is divided into slots of `T` steps. In slot `s` one layer
//! accumulates importance; at the end of the slot that layer reselects its
//! subnet and spends the next slot ramping its learning rate back up from 0.
//! Each layer therefore reselects once every `L·T` steps. Every query is a
//! pure function of the step counter.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrShape {
    #[default]
    Constant,
    Cosine,
}

/// Global learning rate: linear warmup over `warmup` steps, then constant or
/// cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseSchedule {
    pub lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub shape: LrShape,
}

impl BaseSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            warmup: 0,
            total: 0,
            shape: LrShape::Constant,
        }
    }

    pub fn lr(&self, t: u64) -> f64 {
        if t < self.warmup {
            return self.lr * t as f64 / self.warmup as f64;
        }
        match self.shape {
            LrShape::Constant => self.lr,
            LrShape::Cosine => {
                let span = self.total.saturating_sub(self.warmup).max(1);
                let progress = ((t - self.warmup) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Single label for a layer at a step. When phases overlap (a reselection
/// step is also the first rewarm step; with one layer the accumulation slot
/// is also the rewarm slot) the first of RESELECT_NOW, ACCUMULATE, REWARM
/// wins; [`PhaseFlags`] carries the full picture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerPhase {
    Idle,
    Accumulate,
    ReselectNow,
    Rewarm,
}

impl fmt::Display for LayerPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerPhase::Idle => "IDLE",
            LayerPhase::Accumulate => "ACCUMULATE",
            LayerPhase::ReselectNow => "RESELECT_NOW",
            LayerPhase::Rewarm => "REWARM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PhaseFlags {
    /// Importance is accumulated from this step's gradient.
    pub accumulate: bool,
    /// The subnet is reselected before this step's update.
    pub reselect: bool,
    /// The step lies in the slot following a reselection.
    pub rewarm_window: bool,
    /// `rewarm_window` and past the global warmup, so the ramp applies.
    pub rewarm: bool,
}

impl PhaseFlags {
    pub fn primary(&self) -> LayerPhase {
        if self.reselect {
            LayerPhase::ReselectNow
        } else if self.accumulate {
            LayerPhase::Accumulate
        } else if self.rewarm {
            LayerPhase::Rewarm
        } else {
            LayerPhase::Idle
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    /// Steps per slot, `T`.
    pub slot: u64,
    /// Layers in the reselection cycle, `L`.
    pub layers: usize,
    /// Warmup duration `T_w`; the rewarm ramp applies only for `t > T_w`.
    pub warmup: u64,
    pub t: u64,
    pub base: BaseSchedule,
    /// Every layer accumulates in every slot and reselects at every slot
    /// boundary.
    pub synchronous: bool,
    /// Apply the rewarm ramp; off means the multiplier is always 1.
    pub ramp: bool,
}

impl ScheduleState {
    pub fn new(slot: u64, layers: usize, warmup: u64, base: BaseSchedule) -> Result<Self> {
        if slot == 0 {
            return Err(Error::config("time slot T must be at least 1"));
        }
        if layers == 0 {
            return Err(Error::config("schedule needs at least one layer"));
        }
        Ok(Self {
            slot,
            layers,
            warmup,
            t: 0,
            base,
            synchronous: false,
            ramp: true,
        })
    }

    pub fn at(mut self, t: u64) -> Self {
        self.t = t;
        self
    }

    pub fn slot_index(&self) -> u64 {
        self.t / self.slot
    }

    /// Cycle period `L·T`.
    pub fn period(&self) -> u64 {
        self.slot * self.layers as u64
    }

    fn check(&self, layer: usize) -> Result<()> {
        if layer >= self.layers {
            return Err(Error::Index {
                what: "schedule layer",
                index: layer,
                len: self.layers,
            });
        }
        Ok(())
    }

    pub fn flags(&self, layer: usize) -> Result<PhaseFlags> {
        self.check(layer)?;
        let s = self.slot_index();
        let l = self.layers as u64;
        let layer = layer as u64;
        let (accumulate, window) = if self.synchronous {
            (true, s >= 1)
        } else {
            (s % l == (layer + l - 1) % l, s >= 1 && s % l == layer)
        };
        let reselect = window && self.t == s * self.slot;
        Ok(PhaseFlags {
            accumulate,
            reselect,
            rewarm_window: window,
            rewarm: window && self.t > self.warmup,
        })
    }

    pub fn phase_of(&self, layer: usize) -> Result<LayerPhase> {
        Ok(self.flags(layer)?.primary())
    }

    /// Rewarm ramp `(t − sT)/T` inside the layer's rewarm slot after warmup,
    /// otherwise 1.
    pub fn lr_multiplier(&self, layer: usize) -> Result<f64> {
        let f = self.flags(layer)?;
        Ok(if self.ramp && f.rewarm {
            self.ramp_value()
        } else {
            1.0
        })
    }

    fn ramp_value(&self) -> f64 {
        let start = self.slot_index() * self.slot;
        (self.t - start) as f64 / self.slot as f64
    }

    /// Effective rate `multiplier × lr(t)`.
    pub fn layer_lr(&self, layer: usize) -> Result<f64> {
        Ok(self.lr_multiplier(layer)? * self.base.lr(self.t))
    }

    /// Phase of a layer outside the cycle that accumulates during slot 0,
    /// reselects once at `t = T`, and rewarms over slot 1.
    pub fn once_flags(&self) -> PhaseFlags {
        let window = self.slot_index() == 1;
        PhaseFlags {
            accumulate: self.t < self.slot,
            reselect: self.t == self.slot,
            rewarm_window: window,
            rewarm: window && self.t > self.warmup,
        }
    }

    pub fn once_multiplier(&self) -> f64 {
        if self.ramp && self.once_flags().rewarm {
            self.ramp_value()
        } else {
            1.0
        }
    }

    /// Layers accumulating at the current step.
    pub fn accumulating(&self) -> Vec<usize> {
        (0..self.layers)
            .filter(|&l| self.flags(l).map(|f| f.accumulate).unwrap_or(false))
            .collect()
    }

    /// Steps by one and reports the layers whose flags changed.
    pub fn advance(&self) -> (ScheduleState, Vec<usize>) {
        let next = self.at(self.t + 1);
        let changed = (0..self.layers)
            .filter(|&l| self.flags(l).ok() != next.flags(l).ok())
            .collect();
        (next, changed)
    }
}

/// One CSV row per (step, layer): `step,layer,phase,multiplier`.
pub fn timeline_csv(state: &ScheduleState, steps: u64) -> String {
    let mut out = String::from("step,layer,phase,multiplier\n");
    for t in 0..steps {
        let s = state.at(t);
        for l in 0..s.layers {
            let phase = s.phase_of(l).expect("layer in range");
            let mult = s.lr_multiplier(l).expect("layer in range");
            out.push_str(&format!("{t},{l},{phase},{mult}\n"));
        }
    }
    out
}
