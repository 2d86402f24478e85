//! Multi-seed comparisons and sequential (continual) training.

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::analysis::{eval_metrics, ClMatrix};
use crate::error::{Error, Result};
use crate::model::{make_task, TinyDecoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub final_loss: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub digests: Vec<String>,
}

impl SuiteRow {
    pub fn csv_header() -> &'static str {
        "label,seeds,mean_loss,std_loss,mean_accuracy,std_accuracy"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.label,
            self.seeds.len(),
            self.mean_loss,
            self.std_loss,
            self.mean_accuracy,
            self.std_accuracy
        )
    }
}

/// Sample mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn config_label(cfg: &TrainConfig) -> String {
    let mut label = cfg.method.to_string();
    if cfg.method.is_subnet() {
        label.push_str(&format!(" p={}", cfg.p));
        if cfg.p_o < 1.0 {
            label.push_str(&format!(" p_o={}", cfg.p_o));
        }
    }
    for (name, on) in [
        ("sl", cfg.sl),
        ("gl", cfg.gl),
        ("wds_off", cfg.wds_off),
        ("ffto", cfg.ffto),
        ("reset_moments", cfg.reset_moments),
    ] {
        if on {
            label.push(' ');
            label.push_str(name);
        }
    }
    label
}

/// Runs every configuration once per seed (seeds in parallel threads) and
/// aggregates the final evaluation of each.
pub fn run_baseline_suite(configs: &[TrainConfig], seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    if seeds.is_empty() {
        return Err(Error::config("suite needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let results: Vec<Result<(f64, f64, String)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let mut c = cfg.clone();
                    c.seed = seed;
                    scope.spawn(move || -> Result<(f64, f64, String)> {
                        let mut trainer = Trainer::new(c)?;
                        trainer.run()?;
                        let last = trainer
                            .metrics()
                            .final_eval()
                            .ok_or_else(|| Error::State("run produced no evaluation".into()))?;
                        Ok((last.loss, last.accuracy, trainer.metrics().digest()))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::State("training thread panicked".into())))
                })
                .collect()
        });
        let mut losses = Vec::new();
        let mut accs = Vec::new();
        let mut digests = Vec::new();
        for r in results {
            let (l, a, d) = r?;
            losses.push(l);
            accs.push(a);
            digests.push(d);
        }
        let (mean_loss, std_loss) = mean_std(&losses);
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        rows.push(SuiteRow {
            label: config_label(cfg),
            seeds: seeds.to_vec(),
            final_loss: losses,
            final_accuracy: accs,
            mean_loss,
            std_loss,
            mean_accuracy,
            std_accuracy,
            digests,
        });
    }
    Ok(rows)
}

pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut out = format!("{}\n", SuiteRow::csv_header());
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ContinualResult {
    pub matrix: ClMatrix,
    pub model: TinyDecoder,
}

/// Trains the stages in order on one carried model, evaluating every task
/// after each stage. Row 0 holds each task trained alone from scratch.
/// Accuracies are percentages.
pub fn run_continual(configs: &[TrainConfig]) -> Result<ContinualResult> {
    let first = configs
        .first()
        .ok_or_else(|| Error::config("continual run needs at least one stage"))?;
    if configs
        .iter()
        .any(|c| c.decoder_spec() != first.decoder_spec())
    {
        return Err(Error::config(
            "all continual stages must share the model shape",
        ));
    }
    let evals = configs
        .iter()
        .map(|c| {
            make_task(c.task, c.data_seed.unwrap_or(c.seed), &c.task_options())
                .map(|d| d.eval_batches(c.eval_batch_size))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut single = Vec::with_capacity(configs.len());
    for (cfg, eval) in configs.iter().zip(&evals) {
        let mut t = Trainer::new(cfg.clone())?;
        t.run()?;
        single.push(100.0 * eval_metrics(t.model(), eval)?.1);
    }

    let mut rows = vec![single];
    let mut model = TinyDecoder::new(first.decoder_spec(), first.seed)?;
    for cfg in configs {
        let mut t = Trainer::with_model(cfg.clone(), model)?;
        t.run()?;
        model = t.into_model();
        let row = evals
            .iter()
            .map(|e| eval_metrics(&model, e).map(|(_, a)| 100.0 * a))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(ContinualResult {
        matrix: ClMatrix::new(rows)?,
        model,
    })
}
