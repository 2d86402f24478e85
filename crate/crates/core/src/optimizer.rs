//! AdamW restricted to a core subnet, applied from inside the backward hook.
//!
//! A subnet's update only ever touches `W[X_S, Y_S]`; every other entry of
//! the weight is left bit-for-bit untouched. The gradient block can be formed
//! either from the full gradient or directly from an input activation that
//! was stored with only the `X_S` columns, at `p²` of the cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::Subnet;
use crate::params::LinearId;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// One AdamW step on a single scalar. `count` is the entry's own step count,
/// used for bias correction.
#[inline]
fn adamw_scalar(
    w: &mut f64,
    m: &mut f64,
    v: &mut f64,
    count: &mut u64,
    g: f64,
    lr: f64,
    hp: &AdamWConfig,
) {
    *count += 1;
    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
    let n = *count as i32;
    let m_hat = *m / (1.0 - hp.beta1.powi(n));
    let v_hat = *v / (1.0 - hp.beta2.powi(n));
    *w -= lr * (m_hat / (v_hat + hp.eps).sqrt() + hp.weight_decay * *w);
}

fn check_finite(g: &DenseMatrix, step: u64, what: &str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            step,
            what: format!("non-finite gradient for {what}"),
        })
    }
}

/// Moments for a `|X_S| × |Y_S|` block of one layer's weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetAdamWState {
    pub layer: LinearId,
    pub subnet: Subnet,
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    /// Per-entry step counts; migrated entries keep theirs, fresh ones start
    /// at zero.
    pub counts: Vec<u64>,
    pub hp: AdamWConfig,
}

impl SubnetAdamWState {
    pub fn new(layer: LinearId, subnet: Subnet, hp: AdamWConfig) -> Self {
        let (a, b) = (subnet.rows.len(), subnet.cols.len());
        Self {
            layer,
            subnet,
            m: DenseMatrix::zeros(a, b),
            v: DenseMatrix::zeros(a, b),
            counts: vec![0; a * b],
            hp,
        }
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.subnet.rows.len(), self.subnet.cols.len())
    }

    /// Optimizer-state bytes (two moments).
    pub fn bytes(&self) -> usize {
        self.m.bytes() + self.v.bytes()
    }

    /// AdamW on `weight[X_S, Y_S]` at rate `lr` (already multiplied by the
    /// rewarm factor). Decay applies to the touched entries only.
    pub fn fused_step(
        &mut self,
        weight: &mut DenseMatrix,
        grad_block: &DenseMatrix,
        lr: f64,
        step: u64,
    ) -> Result<()> {
        if grad_block.shape() != self.block_shape() {
            return Err(Error::Dimension {
                op: "fused_step",
                lhs: self.block_shape(),
                rhs: grad_block.shape(),
            });
        }
        check_finite(grad_block, step, &format!("linear {}", self.layer.0))?;
        if let (Some(&r), Some(&c)) = (self.subnet.rows.last(), self.subnet.cols.last()) {
            if r >= weight.rows() || c >= weight.cols() {
                return Err(Error::Dimension {
                    op: "fused_step subnet",
                    lhs: (r + 1, c + 1),
                    rhs: weight.shape(),
                });
            }
        }
        let b = self.subnet.cols.len();
        let hp = self.hp;
        for (i, &r) in self.subnet.rows.iter().enumerate() {
            let wrow = weight.row_mut(r);
            for (j, &c) in self.subnet.cols.iter().enumerate() {
                let k = i * b + j;
                adamw_scalar(
                    &mut wrow[c],
                    &mut self.m.data_mut()[k],
                    &mut self.v.data_mut()[k],
                    &mut self.counts[k],
                    grad_block.data()[k],
                    lr,
                    &hp,
                );
            }
        }
        Ok(())
    }

    /// Moves to `new_subnet`: entries selected both before and after keep
    /// their moments and counts, new entries start from zero.
    pub fn migrate(&self, new_subnet: Subnet, reset: bool) -> SubnetAdamWState {
        let mut next = SubnetAdamWState::new(self.layer, new_subnet, self.hp);
        if reset {
            return next;
        }
        let old_b = self.subnet.cols.len();
        let new_b = next.subnet.cols.len();
        let col_map: Vec<Option<usize>> = next
            .subnet
            .cols
            .iter()
            .map(|c| self.subnet.cols.binary_search(c).ok())
            .collect();
        for (i, r) in next.subnet.rows.iter().enumerate() {
            let Ok(oi) = self.subnet.rows.binary_search(r) else {
                continue;
            };
            for (j, oj) in col_map.iter().enumerate() {
                if let Some(oj) = *oj {
                    let (k, ok) = (i * new_b + j, oi * old_b + oj);
                    next.m.data_mut()[k] = self.m.data()[ok];
                    next.v.data_mut()[k] = self.v.data()[ok];
                    next.counts[k] = self.counts[ok];
                }
            }
        }
        next
    }
}

/// Moments for a whole parameter tensor, used for full fine-tuning and for
/// bias vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseAdamW {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub count: u64,
}

impl DenseAdamW {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            count: 0,
        }
    }

    pub fn bytes(&self) -> usize {
        self.m.bytes() + self.v.bytes()
    }

    pub fn step(
        &mut self,
        weight: &mut DenseMatrix,
        grad: &DenseMatrix,
        lr: f64,
        hp: &AdamWConfig,
        step: u64,
    ) -> Result<()> {
        weight.ensure_same_shape(grad, "dense AdamW")?;
        weight.ensure_same_shape(&self.m, "dense AdamW state")?;
        check_finite(grad, step, "dense parameter")?;
        let start = self.count;
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (k, (w, &g)) in weight.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let mut c = start;
            adamw_scalar(w, &mut m[k], &mut v[k], &mut c, g, lr, hp);
        }
        self.count += 1;
        Ok(())
    }
}

/// Subnet gradient block `x_Sᵀ · dy[:, Y_S]` from an input stored with only
/// the `X_S` columns. `dy` may carry all outputs or just the `Y_S` columns.
/// Multiply-adds are added to `macs`.
pub fn losia_pro_grad(
    x_sliced: &DenseMatrix,
    dy: &DenseMatrix,
    subnet: &Subnet,
    macs: &mut u64,
) -> Result<DenseMatrix> {
    if x_sliced.cols() != subnet.rows.len() {
        return Err(Error::Dimension {
            op: "losia_pro_grad input",
            lhs: x_sliced.shape(),
            rhs: (x_sliced.rows(), subnet.rows.len()),
        });
    }
    if dy.cols() == subnet.cols.len() {
        x_sliced.t_matmul_counted(dy, macs)
    } else {
        let dy_s = dy.select_cols(&subnet.cols)?;
        x_sliced.t_matmul_counted(&dy_s, macs)
    }
}

/// Full `xᵀ · dy`, needed while a layer accumulates importance.
pub fn full_grad_path(
    x_full: &DenseMatrix,
    dy: &DenseMatrix,
    macs: &mut u64,
) -> Result<DenseMatrix> {
    x_full.t_matmul_counted(dy, macs)
}
