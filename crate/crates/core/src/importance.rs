//! Sensitivity-based parameter importance with EMA smoothing and
//! uncertainty.
//!
//! For a weight `w` with batch-mean gradient `g` the instantaneous importance
//! is `|g·w − ½(g·w)²|`, a second-order estimate of the loss change if `w`
//! were zeroed. A smoothed sensitivity `Ī` and an uncertainty `Ū` (EMA of the
//! deviation of `I` from `Ī`) are tracked per entry, and the score used for
//! localization is `Ī ⊙ Ū`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LinearId;
use crate::tensor::DenseMatrix;

pub const DEFAULT_BETA: f64 = 0.85;

/// Instantaneous importance, entrywise non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImportance(pub DenseMatrix);

/// `|g⊙W − ½(g⊙W)²|` entrywise.
pub fn raw_importance(grad: &DenseMatrix, weight: &DenseMatrix) -> Result<RawImportance> {
    let m = grad.zip_map(weight, |g, w| {
        let gw = g * w;
        (gw - 0.5 * gw * gw).abs()
    })?;
    Ok(RawImportance(m))
}

/// `|g|` entrywise, the gradient-magnitude score.
pub fn grad_score(grad: &DenseMatrix) -> DenseMatrix {
    grad.map(f64::abs)
}

/// Which smoothed sensitivity the uncertainty deviation is measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationReference {
    /// `ΔI = |I − Ī_{i−1}|`
    #[default]
    PreUpdate,
    /// `ΔI = |I − Ī_i|`
    PostUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub layer: LinearId,
    pub sensitivity: DenseMatrix,
    pub uncertainty: DenseMatrix,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: u64,
    pub reference: DeviationReference,
}

fn check_beta(name: &str, b: f64) -> Result<()> {
    if b > 0.0 && b < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1), got {b}")))
    }
}

impl ImportanceState {
    /// Zero-initialized state for a `rows × cols` weight.
    pub fn new(layer: LinearId, rows: usize, cols: usize, beta1: f64, beta2: f64) -> Result<Self> {
        check_beta("beta1", beta1)?;
        check_beta("beta2", beta2)?;
        Ok(Self {
            layer,
            sensitivity: DenseMatrix::zeros(rows, cols),
            uncertainty: DenseMatrix::zeros(rows, cols),
            beta1,
            beta2,
            steps: 0,
            reference: DeviationReference::PreUpdate,
        })
    }

    pub fn with_reference(mut self, reference: DeviationReference) -> Self {
        self.reference = reference;
        self
    }

    pub fn ema_update(&mut self, raw: &RawImportance) -> Result<()> {
        check_beta("beta1", self.beta1)?;
        check_beta("beta2", self.beta2)?;
        let i = &raw.0;
        self.sensitivity.ensure_same_shape(i, "ema_update")?;
        let (b1, b2) = (self.beta1, self.beta2);
        let reference = self.reference;
        let sens = self.sensitivity.data_mut();
        let unc = self.uncertainty.data_mut();
        for ((s, u), &x) in sens.iter_mut().zip(unc.iter_mut()).zip(i.data()) {
            let prev = *s;
            *s = b1 * prev + (1.0 - b1) * x;
            let dev = match reference {
                DeviationReference::PreUpdate => (x - prev).abs(),
                DeviationReference::PostUpdate => (x - *s).abs(),
            };
            *u = b2 * *u + (1.0 - b2) * dev;
        }
        self.steps += 1;
        Ok(())
    }

    /// `Ī ⊙ Ū`.
    pub fn score(&self) -> Result<DenseMatrix> {
        if self.steps == 0 {
            return Err(Error::State(format!(
                "importance of layer {} scored before any update",
                self.layer.0
            )));
        }
        self.sensitivity.hadamard(&self.uncertainty)
    }

    pub fn bytes(&self) -> usize {
        self.sensitivity.bytes() + self.uncertainty.bytes()
    }
}

/// Per-layer score accumulator covering both the sensitivity score and the
/// gradient-magnitude variant (which keeps a running mean of `|g|`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreAccumulator {
    Sensitivity(ImportanceState),
    GradientMagnitude {
        layer: LinearId,
        mean_abs: DenseMatrix,
        steps: u64,
    },
}

impl ScoreAccumulator {
    pub fn observe(&mut self, grad: &DenseMatrix, weight: &DenseMatrix) -> Result<()> {
        match self {
            ScoreAccumulator::Sensitivity(state) => {
                state.ema_update(&raw_importance(grad, weight)?)
            }
            ScoreAccumulator::GradientMagnitude {
                mean_abs, steps, ..
            } => {
                mean_abs.ensure_same_shape(grad, "gradient score")?;
                *steps += 1;
                let k = 1.0 / *steps as f64;
                for (m, g) in mean_abs.data_mut().iter_mut().zip(grad.data()) {
                    *m += (g.abs() - *m) * k;
                }
                Ok(())
            }
        }
    }

    pub fn score(&self) -> Result<DenseMatrix> {
        match self {
            ScoreAccumulator::Sensitivity(state) => state.score(),
            ScoreAccumulator::GradientMagnitude {
                layer,
                mean_abs,
                steps,
            } => {
                if *steps == 0 {
                    return Err(Error::State(format!(
                        "gradient score of layer {} read before any update",
                        layer.0
                    )));
                }
                Ok(mean_abs.clone())
            }
        }
    }

    pub fn layer(&self) -> LinearId {
        match self {
            ScoreAccumulator::Sensitivity(s) => s.layer,
            ScoreAccumulator::GradientMagnitude { layer, .. } => *layer,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            ScoreAccumulator::Sensitivity(s) => s.steps,
            ScoreAccumulator::GradientMagnitude { steps, .. } => *steps,
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            ScoreAccumulator::Sensitivity(s) => s.bytes(),
            ScoreAccumulator::GradientMagnitude { mean_abs, .. } => mean_abs.bytes(),
        }
    }
}
