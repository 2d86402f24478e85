//! Finite-difference verification of the tape's primitives.
//!
//! Each probe wraps one primitive in a tiny model whose inputs are free
//! parameters, reduces the output to a scalar with a squared-error head, and
//! compares every tape gradient coordinate with a central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, forward_backward, CollectGrads, SavePolicy, Tape};
use crate::error::Result;
use crate::model::{Batch, FeatureTarget, ForwardOutput, Model};
use crate::params::{LinearId, LinearSpec, ParamCoord, ParamId, ParamStore};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    MatMulT,
    Linear,
    Add,
    Mul,
    Scale,
    Relu,
    Gelu,
    Softmax,
    CausalSoftmax,
    LayerNorm,
    SoftmaxCrossEntropy,
    SquaredError,
    Gather,
    SliceConcat,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::MatMul,
        Primitive::MatMulT,
        Primitive::Linear,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Relu,
        Primitive::Gelu,
        Primitive::Softmax,
        Primitive::CausalSoftmax,
        Primitive::LayerNorm,
        Primitive::SoftmaxCrossEntropy,
        Primitive::SquaredError,
        Primitive::Gather,
        Primitive::SliceConcat,
    ];
}

struct Probe {
    prim: Primitive,
    params: ParamStore,
    linears: Vec<LinearSpec>,
    free: Vec<ParamId>,
    aux: Vec<usize>,
    target: DenseMatrix,
}

impl Probe {
    fn new(prim: Primitive, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let (r, k, c) = (
            rng.random_range(2..5),
            rng.random_range(2..5),
            rng.random_range(2..5),
        );
        let mut free = Vec::new();
        let mut linears = Vec::new();
        let mut aux = Vec::new();
        let add = |params: &mut ParamStore,
                   name: &str,
                   rows: usize,
                   cols: usize,
                   rng: &mut ChaCha8Rng| {
            let m = DenseMatrix::random_normal(rows, cols, 1.0, rng);
            params.insert(name, m)
        };
        let out_shape = match prim {
            Primitive::MatMul => {
                free.push(add(&mut params, "a", r, k, rng));
                free.push(add(&mut params, "b", k, c, rng));
                (r, c)
            }
            Primitive::MatMulT => {
                free.push(add(&mut params, "a", r, k, rng));
                free.push(add(&mut params, "b", c, k, rng));
                (r, c)
            }
            Primitive::Linear => {
                free.push(add(&mut params, "x", r, k, rng));
                let weight = add(&mut params, "w", k, c, rng);
                let bias = add(&mut params, "b", 1, c, rng);
                linears.push(LinearSpec {
                    name: "probe".into(),
                    weight,
                    bias: Some(bias),
                    block: Some(0),
                });
                (r, c)
            }
            Primitive::Add | Primitive::Mul => {
                free.push(add(&mut params, "a", r, c, rng));
                free.push(add(&mut params, "b", r, c, rng));
                (r, c)
            }
            Primitive::Relu => {
                // keep away from the kink so the central difference is smooth
                let m = DenseMatrix::random_normal(r, c, 1.0, rng).map(|v| {
                    if v.abs() < 0.05 {
                        v.signum() * 0.05 + v
                    } else {
                        v
                    }
                });
                free.push(params.insert("a", m));
                (r, c)
            }
            Primitive::Scale | Primitive::Gelu | Primitive::Softmax => {
                free.push(add(&mut params, "a", r, c, rng));
                (r, c)
            }
            Primitive::CausalSoftmax => {
                free.push(add(&mut params, "a", c, c, rng));
                (c, c)
            }
            Primitive::LayerNorm => {
                free.push(add(&mut params, "x", r, c.max(3), rng));
                free.push(add(&mut params, "gain", 1, c.max(3), rng));
                free.push(add(&mut params, "shift", 1, c.max(3), rng));
                (r, c.max(3))
            }
            Primitive::SoftmaxCrossEntropy => {
                free.push(add(&mut params, "logits", r, c, rng));
                aux = (0..r).map(|_| rng.random_range(0..c)).collect();
                (1, 1)
            }
            Primitive::SquaredError => {
                free.push(add(&mut params, "pred", r, c, rng));
                (r, c)
            }
            Primitive::Gather => {
                free.push(add(&mut params, "table", k + 1, c, rng));
                aux = (0..r + 2).map(|_| rng.random_range(0..k + 1)).collect();
                (r + 2, c)
            }
            Primitive::SliceConcat => {
                free.push(add(&mut params, "a", r + 2, c + 2, rng));
                (2 * (r + 2), c + 2)
            }
        };
        let target = DenseMatrix::random_normal(out_shape.0, out_shape.1, 1.0, rng);
        Self {
            prim,
            params,
            linears,
            free,
            aux,
            target,
        }
    }
}

impl Model for Probe {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linears(&self) -> &[LinearSpec] {
        &self.linears
    }

    fn forward(&self, tape: &mut Tape, _batch: &Batch) -> Result<ForwardOutput> {
        let p = &self.params;
        let leaf = |tape: &mut Tape, i: usize| tape.param(p, self.free[i]);
        let out = match self.prim {
            Primitive::MatMul => {
                let (a, b) = (leaf(tape, 0), leaf(tape, 1));
                tape.matmul(a, b)?
            }
            Primitive::MatMulT => {
                let (a, b) = (leaf(tape, 0), leaf(tape, 1));
                tape.matmul_t(a, b)?
            }
            Primitive::Linear => {
                let x = leaf(tape, 0);
                tape.linear(p, LinearId(0), &self.linears[0], x)?
            }
            Primitive::Add => {
                let (a, b) = (leaf(tape, 0), leaf(tape, 1));
                tape.add(a, b)?
            }
            Primitive::Mul => {
                let (a, b) = (leaf(tape, 0), leaf(tape, 1));
                tape.mul(a, b)?
            }
            Primitive::Scale => {
                let a = leaf(tape, 0);
                tape.scale(a, -1.7)
            }
            Primitive::Relu => {
                let a = leaf(tape, 0);
                tape.relu(a)
            }
            Primitive::Gelu => {
                let a = leaf(tape, 0);
                tape.gelu(a)
            }
            Primitive::Softmax => {
                let a = leaf(tape, 0);
                tape.softmax(a, false)?
            }
            Primitive::CausalSoftmax => {
                let a = leaf(tape, 0);
                tape.softmax(a, true)?
            }
            Primitive::LayerNorm => {
                let x = leaf(tape, 0);
                tape.layer_norm(p, x, self.free[1], self.free[2])?
            }
            Primitive::SoftmaxCrossEntropy => {
                let z = leaf(tape, 0);
                let weights: Vec<f64> =
                    (0..self.aux.len()).map(|i| 0.5 + i as f64 * 0.25).collect();
                let loss = tape.softmax_cross_entropy(z, &self.aux, &weights)?;
                return Ok(ForwardOutput { loss, logits: z });
            }
            Primitive::SquaredError => leaf(tape, 0),
            Primitive::Gather => tape.gather(p, self.free[0], &self.aux)?,
            Primitive::SliceConcat => {
                let a = leaf(tape, 0);
                let (rows, cols) = tape.value(a).shape();
                let left = tape.slice_cols(a, 0, 2);
                let right = tape.slice_cols(a, 2, cols);
                let swapped = tape.concat_cols(&[right, left])?;
                let top = tape.slice_rows(a, 0, 1);
                let rest = tape.slice_rows(a, 1, rows);
                let rolled = tape.concat_rows(&[rest, top])?;
                tape.concat_rows(&[swapped, rolled])?
            }
        };
        let loss = tape.squared_error(out, &self.target)?;
        Ok(ForwardOutput { loss, logits: out })
    }
}

/// Relative error with an absolute floor so that vanishing gradients compare
/// on an absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Maximum relative error between tape and finite-difference gradients over
/// every parameter coordinate of one seeded instance of `prim`.
pub fn check_primitive(prim: Primitive, seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Probe::new(prim, &mut rng);
    let batch = Batch::Features {
        x: DenseMatrix::zeros(1, 1),
        target: FeatureTarget::Classes(vec![0]),
    };
    let mut hook = CollectGrads::new();
    let out = forward_backward(&mut probe, &batch, SavePolicy::full(), &mut hook, 0)?;

    let mut tape_grads: Vec<(ParamId, DenseMatrix)> = out
        .param_grads
        .iter()
        .map(|(id, g)| (*id, g.clone()))
        .collect();
    if let Some(spec) = probe.linears.first() {
        tape_grads.push((spec.weight, hook.weight[&LinearId(0)].clone()));
        if let Some(b) = spec.bias {
            tape_grads.push((b, hook.bias[&LinearId(0)].clone()));
        }
    }
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = probe.params.ids().collect();
    for id in ids {
        let shape = probe.params.get(id).shape();
        let analytic = tape_grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| DenseMatrix::zeros(shape.0, shape.1));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let coord = ParamCoord {
                    param: id,
                    row: r,
                    col: c,
                };
                let numeric = finite_diff_grad(&mut probe, &batch, coord, h)?;
                worst = worst.max(relative_error(analytic.get(r, c), numeric));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_a_few_seeds() {
        for prim in Primitive::ALL {
            for seed in 0..5 {
                let err = check_primitive(prim, seed, 1e-5).unwrap();
                assert!(err <= 1e-5, "{prim:?} seed {seed}: rel err {err}");
            }
        }
    }
}
