//! Trainable, optimizer, gradient and auxiliary memory of LoRA, GaLore and
//! subnet training, both from the square-layer closed forms and from an
//! exact enumeration over real layer shapes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::floor_count;
use crate::model::DecoderSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModelInput {
    /// Decoder layers `L`.
    pub layers: usize,
    /// `(inputs, outputs)` of the `K` tunable matrices in one layer.
    pub shapes: Vec<(usize, usize)>,
    pub d: usize,
    pub vocab: usize,
    pub bytes_per_scalar: usize,
    /// LoRA rank `r`.
    pub lora_rank: usize,
    /// GaLore projection rank `R`.
    pub galore_rank: usize,
    pub p: f64,
    pub p_o: f64,
}

impl MemoryModelInput {
    /// LLaMA-2 7B: 32 layers, four 4096² attention projections and three
    /// 4096 × 11008 MLP projections, vocabulary 32000, 16-bit storage.
    pub fn llama2_7b() -> Self {
        let (d, f) = (4096, 11008);
        Self {
            layers: 32,
            shapes: vec![(d, d), (d, d), (d, d), (d, d), (d, f), (d, f), (f, d)],
            d,
            vocab: 32000,
            bytes_per_scalar: 2,
            lora_rank: 64,
            galore_rank: 512,
            p: 0.125,
            p_o: 0.125,
        }
    }

    pub fn from_decoder(spec: &DecoderSpec, bytes_per_scalar: usize) -> Self {
        Self {
            layers: spec.layers,
            shapes: spec.projection_shapes().to_vec(),
            d: spec.d_model,
            vocab: spec.vocab,
            bytes_per_scalar,
            lora_rank: 1,
            galore_rank: 1,
            p: 1.0,
            p_o: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.layers,
            self.d,
            self.vocab,
            self.bytes_per_scalar,
            self.lora_rank,
            self.galore_rank,
        ];
        if ints.contains(&0)
            || self.shapes.is_empty()
            || self.shapes.iter().any(|&(a, b)| a == 0 || b == 0)
        {
            return Err(Error::config("memory model inputs must be positive"));
        }
        if !(self.p > 0.0 && self.p <= 1.0 && self.p_o > 0.0 && self.p_o <= 1.0) {
            return Err(Error::config("p and p_o must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.shapes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    Lora,
    Galore,
    Losia,
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(PeftMethod::Lora),
            "galore" => Ok(PeftMethod::Galore),
            "losia" => Ok(PeftMethod::Losia),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftMethod::Lora => "lora",
            PeftMethod::Galore => "galore",
            PeftMethod::Losia => "losia",
        })
    }
}

/// Scalar counts; multiply by the bytes per scalar for memory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub trainable: f64,
    pub optimizer: f64,
    pub gradient: f64,
    pub auxiliary: f64,
}

impl Components {
    pub fn total(&self) -> f64 {
        self.trainable + self.optimizer + self.gradient + self.auxiliary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub method: PeftMethod,
    pub closed_form: Components,
    pub exact: Components,
    pub bytes_per_scalar: usize,
}

impl MemoryRecord {
    pub fn to_csv(&self) -> String {
        let b = self.bytes_per_scalar as f64;
        let mut out = String::from(
            "method,estimate,trainable,optimizer,gradient,auxiliary,total,total_bytes\n",
        );
        for (name, c) in [("closed_form", &self.closed_form), ("exact", &self.exact)] {
            out.push_str(&format!(
                "{},{name},{},{},{},{},{},{}\n",
                self.method,
                c.trainable,
                c.optimizer,
                c.gradient,
                c.auxiliary,
                c.total(),
                c.total() * b
            ));
        }
        out
    }
}

/// Rounds to three significant figures, the precision the parameter tables
/// are reported at.
pub fn round_sig3(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mag = 10f64.powi(x.abs().log10().floor() as i32 - 2);
    (x / mag).round() * mag
}

pub fn memory_model(input: &MemoryModelInput, method: PeftMethod) -> Result<MemoryRecord> {
    input.validate()?;
    let (l, k, d, v) = (
        input.layers as f64,
        input.k() as f64,
        input.d as f64,
        input.vocab as f64,
    );
    let sum_layer =
        |f: &dyn Fn(usize, usize) -> f64| input.shapes.iter().map(|&(a, b)| f(a, b)).sum::<f64>();
    let largest_layer = input
        .shapes
        .iter()
        .map(|&(a, b)| (a * b) as f64)
        .fold(0.0, f64::max);
    let head = v * d;

    let (closed_form, exact) = match method {
        PeftMethod::Lora => {
            let r = input.lora_rank as f64;
            let closed = 2.0 * l * k * r * d;
            let exact = l * sum_layer(&|a, b| r * (a + b) as f64);
            (
                Components {
                    trainable: closed,
                    optimizer: 2.0 * closed,
                    gradient: closed,
                    auxiliary: closed,
                },
                Components {
                    trainable: exact,
                    optimizer: 2.0 * exact,
                    gradient: exact,
                    auxiliary: exact,
                },
            )
        }
        PeftMethod::Galore => {
            let big_r = input.galore_rank;
            let rf = big_r as f64;
            let closed = l * k * rf * rf + head;
            let exact = l * sum_layer(&|a, b| {
                let r = big_r.min(a).min(b) as f64;
                r * r
            }) + head;
            (
                Components {
                    trainable: closed,
                    optimizer: 2.0 * closed,
                    gradient: (d * d).max(head),
                    auxiliary: 2.0 * l * k * rf * d,
                },
                Components {
                    trainable: exact,
                    optimizer: 2.0 * exact,
                    gradient: largest_layer.max(head),
                    auxiliary: l * sum_layer(&|a, b| big_r.min(a).min(b) as f64 * (a + b) as f64),
                },
            )
        }
        PeftMethod::Losia => {
            let (p, p_o) = (input.p, input.p_o);
            let closed = l * k * d * d * p * p + v * d * p_o;
            let exact = l * sum_layer(&|a, b| (floor_count(a, p) * floor_count(b, p)) as f64)
                + d * floor_count(input.vocab, p_o) as f64;
            (
                Components {
                    trainable: closed,
                    optimizer: 2.0 * closed,
                    gradient: (d * d).max(head),
                    auxiliary: 2.0 * k * d * d,
                },
                Components {
                    trainable: exact,
                    optimizer: 2.0 * exact,
                    gradient: largest_layer.max(head),
                    auxiliary: 2.0 * sum_layer(&|a, b| (a * b) as f64),
                },
            )
        }
    };
    Ok(MemoryRecord {
        method,
        closed_form,
        exact,
        bytes_per_scalar: input.bytes_per_scalar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig3_rounding() {
        assert_eq!(round_sig3(159_907_840.0), 160_000_000.0);
        assert_eq!(round_sig3(0.012345), 0.0123);
    }

    #[test]
    fn full_factor_counts_every_linear() {
        let spec = DecoderSpec {
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 44,
            vocab: 64,
            max_seq: 8,
        };
        let rec =
            memory_model(&MemoryModelInput::from_decoder(&spec, 8), PeftMethod::Losia).unwrap();
        assert_eq!(rec.exact.trainable, spec.linear_param_count() as f64);
    }

    #[test]
    fn rejects_nonpositive_inputs() {
        let mut input = MemoryModelInput::llama2_7b();
        input.layers = 0;
        assert!(memory_model(&input, PeftMethod::Lora).is_err());
    }
}
