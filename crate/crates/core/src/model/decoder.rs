use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, ForwardOutput, Model};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{LinearId, LinearSpec, ParamId, ParamStore};
use crate::tensor::DenseMatrix;

/// Linear projections of one decoder layer, in registration order.
pub const DECODER_PROJECTIONS: [&str; 7] = [
    "proj_q",
    "proj_k",
    "proj_v",
    "proj_o",
    "gate_proj",
    "up_proj",
    "down_proj",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.d_ff, self.vocab, self.max_seq];
        if self.layers == 0 || self.heads == 0 || dims.iter().any(|&d| d < 2) {
            return Err(Error::config(format!("invalid decoder spec {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of each projection in a decoder layer.
    pub fn projection_shapes(&self) -> [(usize, usize); 7] {
        let (d, f) = (self.d_model, self.d_ff);
        [(d, d), (d, d), (d, d), (d, d), (d, f), (d, f), (f, d)]
    }

    pub fn lm_head_shape(&self) -> (usize, usize) {
        (self.d_model, self.vocab)
    }

    /// Scalars in all linear layers: `L(4d² + 3d·d_ff) + d·V`.
    pub fn linear_param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab);
        self.layers * (4 * d * d + 3 * d * f) + d * v
    }

    /// Every scalar: linears, token and position tables, and the gain and
    /// shift of each normalization.
    pub fn total_param_count(&self) -> usize {
        let d = self.d_model;
        self.linear_param_count()
            + self.vocab * d
            + self.max_seq * d
            + (2 * self.layers + 1) * 2 * d
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    first_linear: usize,
}

/// Causal pre-norm decoder with multi-head attention and a gated GELU MLP.
#[derive(Debug, Clone)]
pub struct TinyDecoder {
    spec: DecoderSpec,
    params: ParamStore,
    linears: Vec<LinearSpec>,
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    lm_head: LinearId,
}

impl TinyDecoder {
    pub fn new(spec: DecoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut linears = Vec::new();
        let d = spec.d_model;

        let tok_embed = params.insert(
            "tok_embed",
            DenseMatrix::random_normal(spec.vocab, d, 1.0, &mut rng),
        );
        let pos_embed = params.insert(
            "pos_embed",
            DenseMatrix::random_normal(spec.max_seq, d, 0.5, &mut rng),
        );

        let norm = |params: &mut ParamStore, name: &str| {
            (
                params.insert(format!("{name}.gain"), DenseMatrix::filled(1, d, 1.0)),
                params.insert(format!("{name}.shift"), DenseMatrix::zeros(1, d)),
            )
        };

        let mut blocks = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let ln1 = norm(&mut params, &format!("layers.{l}.attn_norm"));
            let ln2 = norm(&mut params, &format!("layers.{l}.mlp_norm"));
            let first_linear = linears.len();
            for (name, (n, m)) in DECODER_PROJECTIONS.iter().zip(spec.projection_shapes()) {
                let full = format!("layers.{l}.{name}");
                let weight = params.insert(
                    format!("{full}.weight"),
                    DenseMatrix::random_normal(n, m, 1.0 / (n as f64).sqrt(), &mut rng),
                );
                linears.push(LinearSpec {
                    name: full,
                    weight,
                    bias: None,
                    block: Some(l),
                });
            }
            blocks.push(Block {
                ln1,
                ln2,
                first_linear,
            });
        }
        let ln_f = norm(&mut params, "final_norm");
        let weight = params.insert(
            "lm_head.weight",
            DenseMatrix::random_normal(d, spec.vocab, 1.0 / (d as f64).sqrt(), &mut rng),
        );
        linears.push(LinearSpec {
            name: "lm_head".into(),
            weight,
            bias: None,
            block: None,
        });
        let lm_head = LinearId(linears.len() - 1);
        Ok(Self {
            spec,
            params,
            linears,
            tok_embed,
            pos_embed,
            blocks,
            ln_f,
            lm_head,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn lm_head(&self) -> LinearId {
        self.lm_head
    }

    pub fn embedding_params(&self) -> [ParamId; 2] {
        [self.tok_embed, self.pos_embed]
    }

    fn attention(
        &self,
        tape: &mut Tape,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
    ) -> Result<NodeId> {
        let heads = self.spec.heads;
        let dh = self.spec.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let (r0, r1) = (b * seq, (b + 1) * seq);
            let (qb, kb, vb) = (
                tape.slice_rows(q, r0, r1),
                tape.slice_rows(k, r0, r1),
                tape.slice_rows(v, r0, r1),
            );
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = if heads == 1 {
                    qb
                } else {
                    tape.slice_cols(qb, c0, c1)
                };
                let kh = if heads == 1 {
                    kb
                } else {
                    tape.slice_cols(kb, c0, c1)
                };
                let vh = if heads == 1 {
                    vb
                } else {
                    tape.slice_cols(vb, c0, c1)
                };
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let probs = tape.softmax(scores, true)?;
                per_head.push(tape.matmul(probs, vh)?);
            }
            per_seq.push(if heads == 1 {
                per_head[0]
            } else {
                tape.concat_cols(&per_head)?
            });
        }
        if batch == 1 {
            Ok(per_seq[0])
        } else {
            tape.concat_rows(&per_seq)
        }
    }
}

impl Model for TinyDecoder {
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
        let (n_seq, seq) = batch.validate_tokens(self.spec.vocab)?;
        if seq > self.spec.max_seq {
            return Err(Error::config(format!(
                "sequence length {seq} exceeds max_seq {}",
                self.spec.max_seq
            )));
        }
        let Batch::Tokens { ids, targets, mask } = batch else {
            unreachable!("validated above")
        };
        let flat_ids: Vec<usize> = ids.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..n_seq).flat_map(|_| 0..seq).collect();
        let p = &self.params;

        let tok = tape.gather(p, self.tok_embed, &flat_ids)?;
        let pos = tape.gather(p, self.pos_embed, &positions)?;
        let mut h = tape.add(tok, pos)?;

        for block in &self.blocks {
            let lin = |i: usize| {
                (
                    LinearId(block.first_linear + i),
                    &self.linears[block.first_linear + i],
                )
            };
            let a = tape.layer_norm(p, h, block.ln1.0, block.ln1.1)?;
            let (id, spec) = lin(0);
            let q = tape.linear(p, id, spec, a)?;
            let (id, spec) = lin(1);
            let k = tape.linear(p, id, spec, a)?;
            let (id, spec) = lin(2);
            let v = tape.linear(p, id, spec, a)?;
            let att = self.attention(tape, q, k, v, n_seq, seq)?;
            let (id, spec) = lin(3);
            let o = tape.linear(p, id, spec, att)?;
            h = tape.add(h, o)?;

            let m = tape.layer_norm(p, h, block.ln2.0, block.ln2.1)?;
            let (id, spec) = lin(4);
            let gate = tape.linear(p, id, spec, m)?;
            let (id, spec) = lin(5);
            let up = tape.linear(p, id, spec, m)?;
            let gate = tape.gelu(gate);
            let act = tape.mul(gate, up)?;
            let (id, spec) = lin(6);
            let down = tape.linear(p, id, spec, act)?;
            h = tape.add(h, down)?;
        }

        let hf = tape.layer_norm(p, h, self.ln_f.0, self.ln_f.1)?;
        let logits = tape.linear(p, self.lm_head, &self.linears[self.lm_head.0], hf)?;
        let flat_targets: Vec<usize> = targets.iter().flatten().copied().collect();
        let flat_mask: Vec<f64> = mask.iter().flatten().copied().collect();
        let loss = tape.softmax_cross_entropy(logits, &flat_targets, &flat_mask)?;
        Ok(ForwardOutput { loss, logits })
    }
}
