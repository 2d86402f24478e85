use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, FeatureTarget, ForwardOutput, Model};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{LinearId, LinearSpec, ParamStore};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpLoss {
    SquaredError,
    CrossEntropy,
}

/// Fully connected network; each linear layer is its own scheduling block.
#[derive(Debug, Clone)]
pub struct Mlp {
    params: ParamStore,
    linears: Vec<LinearSpec>,
    activation: Activation,
    loss: MlpLoss,
}

impl Mlp {
    pub fn new(
        widths: &[usize],
        bias: bool,
        activation: Activation,
        loss: MlpLoss,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("invalid MLP widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut linears = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let std = 1.0 / (w[0] as f64).sqrt();
            let weight = params.insert(
                format!("fc{i}.weight"),
                DenseMatrix::random_normal(w[0], w[1], std, &mut rng),
            );
            let bias = bias.then(|| {
                params.insert(
                    format!("fc{i}.bias"),
                    DenseMatrix::random_normal(1, w[1], 0.1, &mut rng),
                )
            });
            linears.push(LinearSpec {
                name: format!("fc{i}"),
                weight,
                bias,
                block: Some(i),
            });
        }
        Ok(Self {
            params,
            linears,
            activation,
            loss,
        })
    }

    pub fn zeroed(mut self) -> Self {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let (r, c) = self.params.get(id).shape();
            *self.params.get_mut(id) = DenseMatrix::zeros(r, c);
        }
        self
    }
}

impl Model for Mlp {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linears(&self) -> &[LinearSpec] {
        &self.linears
    }

    fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        let Batch::Features { x, target } = batch else {
            return Err(Error::config("MLP expects a feature batch"));
        };
        if x.rows() == 0 {
            return Err(Error::config("empty batch"));
        }
        let mut h = tape.input(x.clone());
        for (i, spec) in self.linears.iter().enumerate() {
            h = tape.linear(&self.params, LinearId(i), spec, h)?;
            if i + 1 < self.linears.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Gelu => tape.gelu(h),
                };
            }
        }
        let loss = match (self.loss, target) {
            (MlpLoss::SquaredError, FeatureTarget::Regression(t)) => tape.squared_error(h, t)?,
            (MlpLoss::CrossEntropy, FeatureTarget::Classes(c)) => {
                tape.softmax_cross_entropy(h, c, &vec![1.0; c.len()])?
            }
            _ => return Err(Error::config("batch target does not match MLP loss")),
        };
        Ok(ForwardOutput { loss, logits: h })
    }
}
