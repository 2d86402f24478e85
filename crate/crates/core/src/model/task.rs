//! Synthetic sequence tasks. Every batch is a pure function of
//! `(seed, step)` so runs replay exactly.

use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::error::{Error, Result};

const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

/// Vocabulary of the byte-level character task.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Echo `k` random tokens after a separator token `0`.
    Copy,
    /// `[a, b] → (a + k·b + c) mod V` at the last position; `k = 1`,
    /// `c = 0` by default.
    ModularAdd,
    /// Next-byte prediction over a text corpus.
    CharLm,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "modular_add" => Ok(TaskKind::ModularAdd),
            "char_lm" => Ok(TaskKind::CharLm),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::ModularAdd => "modular_add",
            TaskKind::CharLm => "char_lm",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TaskOptions {
    pub vocab: usize,
    /// Tokens echoed by `copy`; window length for `char_lm`.
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Share of all `V²` pairs used for training in `modular_add`.
    pub train_fraction: f64,
    pub corpus: Option<PathBuf>,
    /// Coefficient `k` of `b` in `modular_add`.
    pub add_coeff: usize,
    /// Offset `c` in `modular_add`.
    pub add_offset: usize,
}

impl TaskOptions {
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            seq_len: 4,
            train_size: 512,
            eval_size: 128,
            train_fraction: 0.8,
            corpus: None,
            add_coeff: 1,
            add_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

pub fn make_task(kind: TaskKind, seed: u64, opts: &TaskOptions) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0000_0000_0001);
    let (train, eval) = match kind {
        TaskKind::Copy => {
            if opts.vocab < 3 || opts.seq_len == 0 {
                return Err(Error::config("copy needs vocab >= 3 and seq_len >= 1"));
            }
            let mut gen = |n: usize| {
                (0..n)
                    .map(|_| copy_example(opts.vocab, opts.seq_len, &mut rng))
                    .collect::<Vec<_>>()
            };
            let train = gen(opts.train_size);
            let eval = gen(opts.eval_size);
            (train, eval)
        }
        TaskKind::ModularAdd => {
            if opts.vocab < 2 || !(0.0..1.0).contains(&opts.train_fraction) {
                return Err(Error::config(
                    "modular_add needs vocab >= 2 and train_fraction in [0, 1)",
                ));
            }
            let v = opts.vocab;
            let (k, c) = (opts.add_coeff, opts.add_offset);
            let mut all: Vec<Example> = (0..v)
                .flat_map(|a| (0..v).map(move |b| (a, b)))
                .map(|(a, b)| Example {
                    ids: vec![a, b],
                    targets: vec![0, (a + k * b + c) % v],
                    mask: vec![0.0, 1.0],
                })
                .collect();
            all.shuffle(&mut rng);
            let n_train = ((all.len() as f64) * opts.train_fraction).round() as usize;
            let eval = all.split_off(n_train.clamp(1, all.len() - 1));
            (all, eval)
        }
        TaskKind::CharLm => {
            if opts.vocab != BYTE_VOCAB {
                return Err(Error::config(format!(
                    "char_lm is byte-level and needs vocab {BYTE_VOCAB}"
                )));
            }
            let text = match &opts.corpus {
                Some(path) => std::fs::read(path)?,
                None => BUNDLED_CORPUS.as_bytes().to_vec(),
            };
            let w = opts.seq_len;
            if text.len() < 10 * (w + 1) {
                return Err(Error::config("corpus too short for the window length"));
            }
            let cut = text.len() * 9 / 10;
            let windows = |bytes: &[u8]| -> Vec<Example> {
                (0..bytes.len().saturating_sub(w))
                    .map(|i| Example {
                        ids: bytes[i..i + w].iter().map(|&b| b as usize).collect(),
                        targets: bytes[i + 1..i + w + 1]
                            .iter()
                            .map(|&b| b as usize)
                            .collect(),
                        mask: vec![1.0; w],
                    })
                    .collect()
            };
            (windows(&text[..cut]), windows(&text[cut..]))
        }
    };
    if train.is_empty() || eval.is_empty() {
        return Err(Error::config(format!(
            "task {kind} produced an empty split"
        )));
    }
    Ok(Dataset {
        kind,
        vocab: opts.vocab,
        train,
        eval,
    })
}

fn copy_example(vocab: usize, k: usize, rng: &mut ChaCha8Rng) -> Example {
    let tokens: Vec<usize> = (0..k).map(|_| rng.random_range(1..vocab)).collect();
    let mut seq = tokens.clone();
    seq.push(0);
    seq.extend_from_slice(&tokens);
    let ids = seq[..2 * k].to_vec();
    let targets = seq[1..].to_vec();
    let mask = (0..2 * k).map(|p| if p >= k { 1.0 } else { 0.0 }).collect();
    Example { ids, targets, mask }
}

impl Dataset {
    /// Training batch for `step`, sampled with replacement.
    pub fn batch_for_step(&self, seed: u64, step: u64, batch_size: usize) -> Batch {
        let mixed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        let picks: Vec<&Example> = (0..batch_size)
            .map(|_| &self.train[rng.random_range(0..self.train.len())])
            .collect();
        to_batch(&picks)
    }

    pub fn eval_batches(&self, batch_size: usize) -> Vec<Batch> {
        self.eval
            .chunks(batch_size.max(1))
            .map(|chunk| to_batch(&chunk.iter().collect::<Vec<_>>()))
            .collect()
    }

    pub fn seq_len(&self) -> usize {
        self.train[0].ids.len()
    }
}

fn to_batch(examples: &[&Example]) -> Batch {
    Batch::Tokens {
        ids: examples.iter().map(|e| e.ids.clone()).collect(),
        targets: examples.iter().map(|e| e.targets.clone()).collect(),
        mask: examples.iter().map(|e| e.mask.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_are_recoverable_from_inputs() {
        let ds = make_task(TaskKind::Copy, 3, &TaskOptions::with_vocab(10)).unwrap();
        for ex in ds.train.iter().chain(&ds.eval) {
            let k = ex.ids.len() / 2;
            for p in k..2 * k {
                assert_eq!(ex.mask[p], 1.0);
                assert_eq!(ex.targets[p], ex.ids[p - k]);
            }
            assert_eq!(ex.ids[k], 0);
        }
    }

    #[test]
    fn modular_add_split_covers_all_pairs_once() {
        let ds = make_task(TaskKind::ModularAdd, 1, &TaskOptions::with_vocab(7)).unwrap();
        let mut seen: Vec<(usize, usize)> = ds
            .train
            .iter()
            .chain(&ds.eval)
            .map(|e| (e.ids[0], e.ids[1]))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 49);
        assert_eq!(ds.train.len() + ds.eval.len(), 49);
        for e in ds.train.iter().chain(&ds.eval) {
            assert_eq!(e.targets[1], (e.ids[0] + e.ids[1]) % 7);
        }
    }

    #[test]
    fn modular_add_coefficient_and_offset() {
        let mut opts = TaskOptions::with_vocab(5);
        opts.add_coeff = 4;
        opts.add_offset = 2;
        let ds = make_task(TaskKind::ModularAdd, 0, &opts).unwrap();
        for e in ds.train.iter().chain(&ds.eval) {
            assert_eq!(e.targets[1], (e.ids[0] + 4 * e.ids[1] + 2) % 5);
        }
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let ds = make_task(TaskKind::ModularAdd, 9, &TaskOptions::with_vocab(11)).unwrap();
        let ds2 = make_task(TaskKind::ModularAdd, 9, &TaskOptions::with_vocab(11)).unwrap();
        for step in 0..20 {
            assert_eq!(
                ds.batch_for_step(5, step, 8),
                ds2.batch_for_step(5, step, 8)
            );
        }
        assert_ne!(ds.batch_for_step(5, 0, 8), ds.batch_for_step(5, 1, 8));
    }

    #[test]
    fn char_lm_is_byte_level() {
        let mut opts = TaskOptions::with_vocab(256);
        opts.seq_len = 8;
        let ds = make_task(TaskKind::CharLm, 0, &opts).unwrap();
        assert_eq!(ds.seq_len(), 8);
        assert!(make_task(TaskKind::CharLm, 0, &TaskOptions::with_vocab(64)).is_err());
    }

    #[test]
    fn unknown_task_name_is_a_config_error() {
        assert!(matches!(
            "sorting".parse::<TaskKind>(),
            Err(Error::Config(_))
        ));
    }
}
