//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order and the backward sweep walks them
//! in exact reverse order. Linear layers are special: the engine never forms
//! their weight gradient. Instead it hands the saved input activation and the
//! upstream gradient to a [`LayerGradHook`] the moment the layer's backward
//! step completes, and drops the saved input right after.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::params::{LinearId, LinearSpec, ParamCoord, ParamId, ParamStore};
use crate::tensor::DenseMatrix;

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// How a linear layer keeps its input activation for the weight gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedInput {
    Full(DenseMatrix),
    /// Only the listed input columns (input neurons) are kept.
    Columns {
        cols: Vec<usize>,
        x: DenseMatrix,
    },
}

impl SavedInput {
    pub fn matrix(&self) -> &DenseMatrix {
        match self {
            SavedInput::Full(x) => x,
            SavedInput::Columns { x, .. } => x,
        }
    }

    pub fn bytes(&self) -> usize {
        self.matrix().bytes()
    }
}

/// Per-layer activation storage policy applied during the forward pass.
#[derive(Debug, Clone, Default)]
pub struct SavePolicy {
    sliced: HashMap<LinearId, Vec<usize>>,
}

impl SavePolicy {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn slice(&mut self, layer: LinearId, cols: Vec<usize>) {
        self.sliced.insert(layer, cols);
    }

    pub fn columns_for(&self, layer: LinearId) -> Option<&[usize]> {
        self.sliced.get(&layer).map(Vec::as_slice)
    }
}

/// Payload delivered to a hook when a linear layer's backward step is done.
pub struct LinearGrad<'a> {
    pub layer: LinearId,
    pub input: &'a SavedInput,
    /// `∂L/∂y`, shaped `(rows, outputs)`.
    pub upstream: &'a DenseMatrix,
    /// `∂L/∂b` as a `1 × outputs` row, when the layer has a bias.
    pub bias_grad: Option<&'a DenseMatrix>,
}

pub trait LayerGradHook {
    /// Called exactly once per linear layer per backward pass, after the
    /// input gradient has been computed from the pre-update weight.
    fn on_linear(&mut self, grad: LinearGrad<'_>, params: &mut ParamStore) -> Result<()>;
}

/// Hook that ignores every layer.
pub struct NoopHook;

impl LayerGradHook for NoopHook {
    fn on_linear(&mut self, _: LinearGrad<'_>, _: &mut ParamStore) -> Result<()> {
        Ok(())
    }
}

/// Hook that materializes the full weight and bias gradients. Meant for
/// tests, analysis, and the dense baseline.
#[derive(Debug, Default)]
pub struct CollectGrads {
    pub weight: HashMap<LinearId, DenseMatrix>,
    pub bias: HashMap<LinearId, DenseMatrix>,
    pub inputs: HashMap<LinearId, DenseMatrix>,
    pub order: Vec<LinearId>,
    keep_inputs: bool,
}

impl CollectGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keeping_inputs() -> Self {
        Self {
            keep_inputs: true,
            ..Self::default()
        }
    }
}

impl LayerGradHook for CollectGrads {
    fn on_linear(&mut self, grad: LinearGrad<'_>, _: &mut ParamStore) -> Result<()> {
        let x = match grad.input {
            SavedInput::Full(x) => x,
            SavedInput::Columns { .. } => {
                return Err(Error::State(
                    "CollectGrads needs full input activations".into(),
                ))
            }
        };
        self.weight.insert(grad.layer, x.t_matmul(grad.upstream)?);
        if let Some(b) = grad.bias_grad {
            self.bias.insert(grad.layer, b.clone());
        }
        if self.keep_inputs {
            self.inputs.insert(grad.layer, x.clone());
        }
        self.order.push(grad.layer);
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    Linear {
        x: NodeId,
        layer: LinearId,
        weight: ParamId,
        bias: Option<ParamId>,
        saved: Option<SavedInput>,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        causal: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: DenseMatrix,
        inv_std: Vec<f64>,
    },
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: DenseMatrix,
    },
    SquaredError {
        pred: NodeId,
        target: DenseMatrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Non-linear-layer parameter gradients produced by a backward sweep
/// (embeddings, normalization gains and shifts, free parameters).
#[derive(Debug, Default, Clone)]
pub struct ParamGrads {
    grads: HashMap<ParamId, DenseMatrix>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&DenseMatrix> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &DenseMatrix)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: DenseMatrix) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
                Ok(())
            }
        }
    }
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    policy: SavePolicy,
    saved_bytes: HashMap<LinearId, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: SavePolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.get(0, 0)
    }

    /// Bytes of input activation held by linear layers for their weight
    /// gradients, per layer.
    pub fn saved_activation_bytes(&self) -> &HashMap<LinearId, usize> {
        &self.saved_bytes
    }

    pub fn total_saved_activation_bytes(&self) -> usize {
        self.saved_bytes.values().sum()
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), params.get(id).clone())
    }

    /// Row lookup into a parameter table.
    pub fn gather(&mut self, params: &ParamStore, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let value = params.get(table).select_rows(ids)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn linear(
        &mut self,
        params: &ParamStore,
        layer: LinearId,
        spec: &LinearSpec,
        x: NodeId,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let w = params.get(spec.weight);
        let mut y = xv.matmul(w)?;
        if let Some(b) = spec.bias {
            let b = params.get(b);
            if b.shape() != (1, y.cols()) {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: y.shape(),
                    rhs: b.shape(),
                });
            }
            for r in 0..y.rows() {
                for (o, bv) in y.row_mut(r).iter_mut().zip(b.row(0)) {
                    *o += bv;
                }
            }
        }
        let saved = match self.policy.columns_for(layer) {
            Some(cols) => SavedInput::Columns {
                cols: cols.to_vec(),
                x: xv.select_cols(cols)?,
            },
            None => SavedInput::Full(xv.clone()),
        };
        *self.saved_bytes.entry(layer).or_default() += saved.bytes();
        Ok(self.push(
            Op::Linear {
                x,
                layer,
                weight: spec.weight,
                bias: spec.bias,
                saved: Some(saved),
            },
            y,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a × bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul_t(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.hadamard(&self.nodes[b].value)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(gelu);
        self.push(Op::Gelu(a), v)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out and contributes zero.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if causal && x.rows() > x.cols() {
            return Err(Error::Dimension {
                op: "causal softmax",
                lhs: x.shape(),
                rhs: (x.cols(), x.cols()),
            });
        }
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let valid = if causal { r + 1 } else { x.cols() };
            let row = &x.row(r)[..valid];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let o = out.row_mut(r);
            for (o, &v) in o.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in o[..valid].iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(Op::Softmax { x: a, causal }, out))
    }

    pub fn layer_norm(
        &mut self,
        params: &ParamStore,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let g = params.get(gamma);
        let b = params.get(beta);
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape(),
                rhs: g.shape(),
            });
        }
        let n = xv.cols() as f64;
        let mut xhat = DenseMatrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = DenseMatrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..xv.cols() {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a].value.row_range(start, end);
        self.push(Op::SliceRows(a, start), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a].value.col_range(start, end);
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = DenseMatrix::new(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.nodes[parts[0]].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Weighted mean softmax cross-entropy. Rows with zero weight are
    /// ignored; the result is `Σ_r w_r·CE_r / Σ_r w_r` as a `1×1` node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let z = &self.nodes[logits].value;
        if targets.len() != z.rows() || weights.len() != z.rows() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: z.shape(),
                rhs: (targets.len(), weights.len()),
            });
        }
        let total_w: f64 = weights.iter().sum();
        if total_w <= 0.0 {
            return Err(Error::State("cross-entropy with zero total weight".into()));
        }
        let mut probs = DenseMatrix::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp();
                total += *p;
            }
            for p in probs.row_mut(r) {
                *p /= total;
            }
            if weights[r] != 0.0 {
                let t = targets[r];
                if t >= z.cols() {
                    return Err(Error::Index {
                        what: "cross-entropy target",
                        index: t,
                        len: z.cols(),
                    });
                }
                let log_p = row[t] - max - total.ln();
                loss -= weights[r] * log_p;
            }
        }
        let v = DenseMatrix::from_rows(&[[loss / total_w]]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            v,
        ))
    }

    /// Mean over rows of `½‖pred_r − target_r‖²`.
    pub fn squared_error(&mut self, pred: NodeId, target: &DenseMatrix) -> Result<NodeId> {
        let p = &self.nodes[pred].value;
        p.ensure_same_shape(target, "squared_error")?;
        let diff = p.sub(target)?;
        let v = DenseMatrix::from_rows(&[[0.5 * diff.frobenius_sq() / p.rows() as f64]]);
        Ok(self.push(
            Op::SquaredError {
                pred,
                target: target.clone(),
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar node. Linear-layer weight gradients go to
    /// `hook`; every other parameter gradient is returned.
    pub fn backward(
        mut self,
        root: NodeId,
        params: &mut ParamStore,
        hook: &mut dyn LayerGradHook,
    ) -> Result<ParamGrads> {
        if self.nodes[root].value.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward root",
                lhs: self.nodes[root].value.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; root + 1];
        grads[root] = Some(DenseMatrix::filled(1, 1, 1.0));
        let mut out = ParamGrads::default();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Input);
            match op {
                Op::Input => {}
                Op::Param(p) => out.accumulate(p, g)?,
                Op::Gather { table, ids } => {
                    let shape = params.get(table).shape();
                    let mut acc = DenseMatrix::zeros(shape.0, shape.1);
                    for (r, &i) in ids.iter().enumerate() {
                        for (a, v) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    out.accumulate(table, acc)?;
                }
                Op::Linear {
                    x,
                    layer,
                    weight,
                    bias,
                    saved,
                } => {
                    let saved = saved.expect("linear input consumed twice");
                    // input gradient from the weight as it was in the forward pass
                    let dx = g.matmul_t(params.get(weight))?;
                    let bias_grad = bias.map(|_| DenseMatrix::row_vector(&g.col_sums()));
                    hook.on_linear(
                        LinearGrad {
                            layer,
                            input: &saved,
                            upstream: &g,
                            bias_grad: bias_grad.as_ref(),
                        },
                        params,
                    )?;
                    drop(saved);
                    accumulate(&mut grads, x, dx)?;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.nodes[b].value)?;
                    let db = self.nodes[a].value.t_matmul(&g)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let da = g.matmul(&self.nodes[b].value)?;
                    let db = g.t_matmul(&self.nodes[a].value)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(&self.nodes[b].value)?;
                    let db = g.hadamard(&self.nodes[a].value)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, a, g.scale(s))?;
                }
                Op::Relu(a) => {
                    let d = self.nodes[a]
                        .value
                        .zip_map(&g, |x, g| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::Gelu(a) => {
                    let d = self.nodes[a].value.zip_map(&g, |x, g| g * gelu_grad(x))?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::Softmax { x, causal } => {
                    let p = &self.nodes[id].value;
                    let mut dx = DenseMatrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let valid = if causal { r + 1 } else { p.cols() };
                        let pr = &p.row(r)[..valid];
                        let gr = &g.row(r)[..valid];
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (pv, gv)) in dx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *d = pv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = params.get(gamma);
                    let n = xhat.cols() as f64;
                    let mut dx = DenseMatrix::zeros(xhat.rows(), xhat.cols());
                    let mut dgamma = DenseMatrix::zeros(1, xhat.cols());
                    let mut dbeta = DenseMatrix::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        let h = xhat.row(r);
                        let gr = g.row(r);
                        let dh: Vec<f64> = gr.iter().zip(gv.row(0)).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.cols() {
                            dx.set(
                                r,
                                c,
                                inv_std[r] / n * (n * dh[c] - sum_dh - h[c] * sum_dh_h),
                            );
                            *dgamma.get_mut(0, c) += gr[c] * h[c];
                            *dbeta.get_mut(0, c) += gr[c];
                        }
                    }
                    out.accumulate(gamma, dgamma)?;
                    out.accumulate(beta, dbeta)?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.nodes[a].value.shape();
                    let mut d = DenseMatrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, d)?;
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.nodes[a].value.shape();
                    let mut d = DenseMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, d)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p].value.rows();
                        accumulate(&mut grads, p, g.row_range(offset, offset + rows))?;
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, g.col_range(offset, offset + cols))?;
                        offset += cols;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let total_w: f64 = weights.iter().sum();
                    let upstream = g.get(0, 0);
                    let mut d = DenseMatrix::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let k = upstream * weights[r] / total_w;
                        for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            *dv = k * (probs.get(r, c) - onehot);
                        }
                    }
                    accumulate(&mut grads, logits, d)?;
                }
                Op::SquaredError { pred, target } => {
                    let m = target.rows() as f64;
                    let k = g.get(0, 0) / m;
                    let d = self.nodes[pred]
                        .value
                        .zip_map(&target, |p, t| k * (p - t))?;
                    accumulate(&mut grads, pred, d)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Result of one forward/backward sweep.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub param_grads: ParamGrads,
    pub saved_activation_bytes: HashMap<LinearId, usize>,
}

/// Mean loss over `batch`, firing `hook` for every linear layer during the
/// reverse sweep. No weight gradient outlives the hook calls.
pub fn forward_backward(
    model: &mut dyn Model,
    batch: &Batch,
    policy: SavePolicy,
    hook: &mut dyn LayerGradHook,
    step: u64,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut tape = Tape::with_policy(policy);
    let out = model.forward(&mut tape, batch)?;
    let loss = tape.scalar(out.loss);
    if !loss.is_finite() {
        return Err(Error::NumericOverflow {
            step,
            what: format!("loss = {loss}"),
        });
    }
    let saved_activation_bytes = tape.saved_activation_bytes().clone();
    let param_grads = tape.backward(out.loss, model.params_mut(), hook)?;
    Ok(StepOutput {
        loss,
        param_grads,
        saved_activation_bytes,
    })
}

/// Forward pass only; returns the loss and the logits.
pub fn evaluate(model: &dyn Model, batch: &Batch) -> Result<(f64, DenseMatrix)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch)?;
    Ok((tape.scalar(out.loss), tape.value(out.logits).clone()))
}

/// Central difference `(L(w+h) − L(w−h)) / 2h` at one parameter coordinate.
/// The model is restored bitwise afterwards.
pub fn finite_diff_grad(
    model: &mut dyn Model,
    batch: &Batch,
    coord: ParamCoord,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let original = model.params().coord(coord)?;
    model.params_mut().set_coord(coord, original + h)?;
    let plus = evaluate(model, batch).map(|r| r.0);
    model.params_mut().set_coord(coord, original - h)?;
    let minus = evaluate(model, batch).map(|r| r.0);
    model.params_mut().set_coord(coord, original)?;
    Ok((plus? - minus?) / (2.0 * h))
}
