//! Desk-scale models and the synthetic tasks they train on.

mod decoder;
mod mlp;
pub mod task;

pub use decoder::{DecoderSpec, TinyDecoder, DECODER_PROJECTIONS};
pub use mlp::{Activation, Mlp, MlpLoss};
pub use task::{make_task, Dataset, Example, TaskKind, TaskOptions, BYTE_VOCAB};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{LinearId, LinearSpec, ParamStore};
use crate::tensor::DenseMatrix;

/// A training batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// Token sequences of equal length. `targets[b][t]` is the label for
    /// position `t` of sequence `b`; only positions with non-zero `mask`
    /// contribute to the loss.
    Tokens {
        ids: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
        mask: Vec<Vec<f64>>,
    },
    /// One sample per row of `x`.
    Features {
        x: DenseMatrix,
        target: FeatureTarget,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureTarget {
    Regression(DenseMatrix),
    Classes(Vec<usize>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Tokens { ids, .. } => ids.len(),
            Batch::Features { x, .. } => x.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The single-sample batch at `index`.
    pub fn sample(&self, index: usize) -> Batch {
        match self {
            Batch::Tokens { ids, targets, mask } => Batch::Tokens {
                ids: vec![ids[index].clone()],
                targets: vec![targets[index].clone()],
                mask: vec![mask[index].clone()],
            },
            Batch::Features { x, target } => Batch::Features {
                x: x.row_range(index, index + 1),
                target: match target {
                    FeatureTarget::Regression(t) => {
                        FeatureTarget::Regression(t.row_range(index, index + 1))
                    }
                    FeatureTarget::Classes(c) => FeatureTarget::Classes(vec![c[index]]),
                },
            },
        }
    }

    pub(crate) fn validate_tokens(&self, vocab: usize) -> Result<(usize, usize)> {
        let Batch::Tokens { ids, targets, mask } = self else {
            return Err(Error::config("token model given a feature batch"));
        };
        if ids.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let seq = ids[0].len();
        for ((i, t), m) in ids.iter().zip(targets).zip(mask) {
            if i.len() != seq || t.len() != seq || m.len() != seq {
                return Err(Error::Dimension {
                    op: "token batch",
                    lhs: (ids.len(), seq),
                    rhs: (t.len(), m.len()),
                });
            }
            if let Some(&bad) = i.iter().chain(t).find(|&&v| v >= vocab) {
                return Err(Error::Index {
                    what: "token id",
                    index: bad,
                    len: vocab,
                });
            }
        }
        Ok((ids.len(), seq))
    }
}

/// Nodes produced by a model's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub loss: NodeId,
    pub logits: NodeId,
}

pub trait Model: Send {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Linear layers in a stable registration order.
    fn linears(&self) -> &[LinearSpec];
    fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput>;

    fn linear(&self, id: LinearId) -> &LinearSpec {
        &self.linears()[id.0]
    }

    fn find_linear(&self, name: &str) -> Option<LinearId> {
        self.linears()
            .iter()
            .position(|l| l.name == name)
            .map(LinearId)
    }

    /// Number of scheduling blocks (decoder layers).
    fn blocks(&self) -> usize {
        self.linears()
            .iter()
            .filter_map(|l| l.block)
            .max()
            .map_or(0, |b| b + 1)
    }
}

/// Fraction of masked positions whose argmax prediction matches the target.
pub fn token_accuracy(logits: &DenseMatrix, batch: &Batch) -> (usize, usize) {
    match batch {
        Batch::Tokens { targets, mask, .. } => {
            let mut hit = 0;
            let mut total = 0;
            for (r, (t, m)) in targets
                .iter()
                .flatten()
                .zip(mask.iter().flatten())
                .enumerate()
            {
                if *m == 0.0 {
                    continue;
                }
                total += 1;
                if argmax(logits.row(r)) == *t {
                    hit += 1;
                }
            }
            (hit, total)
        }
        Batch::Features { target, .. } => match target {
            FeatureTarget::Classes(c) => {
                let hit = c
                    .iter()
                    .enumerate()
                    .filter(|(r, &t)| argmax(logits.row(*r)) == t)
                    .count();
                (hit, c.len())
            }
            FeatureTarget::Regression(_) => (0, 0),
        },
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
