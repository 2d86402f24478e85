use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use losia::analysis::{
    cl_metrics, grad_heatmap, layer_scores, mask_and_eval, memory_model, spectral_drift, ClMatrix,
    MemoryModelInput, PeftMethod, ScoreSource,
};
use losia::localization::{
    brute_force_subnet, column2row, output_layer_subnet, row2column, select_best, subnet_score,
    RankFactor, Strategy,
};
use losia::model::{Batch, Model};
use losia::params::LinearId;
use losia::schedule::{timeline_csv, BaseSchedule, ScheduleState};
use losia::train::{
    config_label, output_dir, run_baseline_suite, run_continual, save_checkpoint,
    selection_frequency_report, suite_csv, TrainConfig, Trainer,
};
use losia::DenseMatrix;

#[derive(Parser)]
#[command(
    name = "losia",
    version,
    about = "Subnet-localized fine-tuning on small models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics plus a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configuration matching a glob over several seeds.
    Suite {
        #[arg(long)]
        configs: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configurations in order on one carried model.
    Continual {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Analyze(Analyze),
    /// Choose a subnet from a score matrix stored as CSV.
    Select {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.125)]
        p: f64,
        #[arg(long, value_enum, default_value_t = SelectStrategy::Best)]
        strategy: SelectStrategy,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Schedule(ScheduleCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectStrategy {
    Best,
    Row2column,
    Column2row,
    Exhaustive,
    /// Top columns by column sum, all rows (output head).
    Output,
}

#[derive(Args)]
struct TrainedModel {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// |∇W| of one layer on the first evaluation batch after training.
    Heatmap {
        #[command(flatten)]
        run: TrainedModel,
        /// Linear layer name, e.g. `layers.0.proj_v.weight`.
        #[arg(long, default_value = "layers.0.proj_v")]
        layer: String,
    },
    /// Top-k singular-vector similarity of each decoder linear before and after training.
    Drift {
        #[command(flatten)]
        run: TrainedModel,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Accuracy after masking the middle decoder layers down to scored subnets.
    Mask {
        #[command(flatten)]
        run: TrainedModel,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 0.9, 0.99])]
        pcts: Vec<f64>,
        /// Batches used to accumulate scores.
        #[arg(long, default_value_t = 8)]
        score_batches: u64,
    },
    /// Memory accounting of LoRA, GaLore and subnet training.
    Memory {
        /// Use the shapes of a config's tiny decoder instead of LLaMA-2 7B.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        p_o: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        galore_rank: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP, FWT and BWT of a stage × task accuracy matrix.
    Cl {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// Phase and multiplier of every layer at every step, as CSV.
    Dump {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        slot: u64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        warmup: u64,
        /// Every layer reselects at every slot boundary.
        #[arg(long)]
        sync: bool,
        #[arg(long)]
        no_ramp: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Suite {
            configs,
            seeds,
            out,
        } => suite(&configs, &seeds, out),
        Command::Continual { configs, out } => continual(&configs, out),
        Command::Analyze(a) => analyze(a),
        Command::Select {
            scores,
            p,
            strategy,
            out,
        } => select(&scores, p, strategy, out),
        Command::Schedule(ScheduleCmd::Dump {
            layers,
            slot,
            steps,
            warmup,
            sync,
            no_ramp,
            out,
        }) => {
            let mut state = ScheduleState::new(slot, layers, warmup, BaseSchedule::constant(1.0))?;
            state.synchronous = sync;
            state.ramp = !no_ramp;
            emit(out.as_deref(), &timeline_csv(&state, steps))
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_name(cfg: &TrainConfig) -> String {
    format!("{}-{}-seed{}", cfg.task, cfg.method, cfg.seed)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load(path, seed)?;
    let dir = out.unwrap_or_else(|| output_dir(&cfg, &run_name(&cfg)));
    let mut trainer = Trainer::new(cfg)?;
    trainer
        .run_with_failure_dir(Some(&dir.join("failure_checkpoint")))
        .with_context(|| format!("training {}", path.display()))?;
    trainer.write_outputs(&dir)?;
    save_checkpoint(&trainer, &dir.join("checkpoint"))?;
    if trainer.config().method.is_subnet() {
        fs::write(
            dir.join("selection_frequency.csv"),
            selection_frequency_report(trainer.metrics()),
        )?;
    }
    if let Some(e) = trainer.metrics().final_eval() {
        println!(
            "{}: eval loss {:.4}, accuracy {:.4}, digest {}",
            config_label(trainer.config()),
            e.loss,
            e.accuracy,
            trainer.metrics().digest()
        );
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn suite(pattern: &str, seeds: &[u64], out: Option<PathBuf>) -> Result<()> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)?.collect::<std::result::Result<_, _>>()?;
    paths.sort();
    if paths.is_empty() {
        bail!("no configs match {pattern}");
    }
    let configs = paths
        .iter()
        .map(|p| load(p, None))
        .collect::<Result<Vec<_>>>()?;
    if configs.iter().any(|c| c.task != configs[0].task) {
        bail!("suite configs must share one task");
    }
    let rows = run_baseline_suite(&configs, seeds)?;
    let dir = out.unwrap_or_else(|| output_dir(&configs[0], "suite"));
    fs::create_dir_all(&dir)?;
    let csv = suite_csv(&rows);
    fs::write(dir.join("suite.csv"), &csv)?;
    fs::write(dir.join("suite.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{csv}");
    Ok(())
}

fn continual(paths: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let configs = paths
        .iter()
        .map(|p| load(p, None))
        .collect::<Result<Vec<_>>>()?;
    let result = run_continual(&configs)?;
    let dir = out.unwrap_or_else(|| output_dir(&configs[0], "continual"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("cl_matrix.csv"), result.matrix.to_csv())?;
    let metrics = cl_json(&result.matrix);
    fs::write(
        dir.join("cl_metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    print!("{}", result.matrix.to_csv());
    println!("{metrics}");
    Ok(())
}

fn cl_json(m: &ClMatrix) -> serde_json::Value {
    // BWT needs two tasks; report null rather than failing.
    json!({ "ap": m.ap(), "fwt": m.fwt(), "bwt": m.bwt().ok() })
}

fn trained(run: &TrainedModel, name: &str) -> Result<(Trainer, PathBuf)> {
    let cfg = load(&run.config, run.seed)?;
    let dir = run
        .out
        .clone()
        .unwrap_or_else(|| output_dir(&cfg, &format!("{}-{name}", run_name(&cfg))));
    let mut trainer = Trainer::new(cfg)?;
    trainer.run()?;
    fs::create_dir_all(&dir)?;
    Ok((trainer, dir))
}

fn find_layer(model: &dyn Model, name: &str) -> Result<LinearId> {
    let trimmed = name.strip_suffix(".weight").unwrap_or(name);
    model
        .find_linear(trimmed)
        .or_else(|| model.find_linear(name))
        .with_context(|| {
            let names: Vec<&str> = model.linears().iter().map(|l| l.name.as_str()).collect();
            format!("no linear layer '{name}'; available: {}", names.join(", "))
        })
}

fn analyze(cmd: Analyze) -> Result<()> {
    match cmd {
        Analyze::Heatmap { run, layer } => {
            let (trainer, dir) = trained(&run, "heatmap")?;
            let mut model = trainer.model().clone();
            let id = find_layer(&model, &layer)?;
            let batch = trainer
                .dataset()
                .eval_batches(trainer.config().eval_batch_size)
                .remove(0);
            let h = grad_heatmap(&mut model, &batch, id)?;
            fs::write(dir.join("heatmap.csv"), h.matrix_csv())?;
            fs::write(dir.join("margins.csv"), h.margins_csv())?;
            let k = losia::localization::floor_count(h.abs.rows(), trainer.config().p).max(1);
            println!(
                "top {k} of {} rows hold {:.3} of |grad| mass (uniform share {:.3})",
                h.abs.rows(),
                h.top_row_share(k),
                k as f64 / h.abs.rows() as f64
            );
            println!("outputs in {}", dir.display());
        }
        Analyze::Drift { run, k } => {
            let (trainer, dir) = trained(&run, "drift")?;
            let model = trainer.model();
            let mut csv = String::from("layer,index,similarity\n");
            let mut converged = true;
            for spec in model.linears().iter().filter(|l| l.block.is_some()) {
                let before = trainer.initial_params().get(spec.weight);
                let after = model.params().get(spec.weight);
                let d = spectral_drift(before, after, k)?;
                converged &= d.converged;
                for (i, s) in d.similarity.iter().enumerate() {
                    csv.push_str(&format!("{},{i},{s}\n", spec.name));
                }
            }
            fs::write(dir.join("drift.csv"), &csv)?;
            if !converged {
                eprintln!("warning: orthogonal iteration hit its sweep limit on some layer");
            }
            println!("outputs in {}", dir.display());
        }
        Analyze::Mask {
            run,
            pcts,
            score_batches,
        } => {
            let (trainer, dir) = trained(&run, "mask")?;
            let cfg = trainer.config();
            let mut model = trainer.model().clone();
            let blocks = model.blocks();
            // Middle decoder layers: everything but the first and last when
            // there are at least three.
            let middle: Vec<usize> = if blocks >= 3 {
                (1..blocks - 1).collect()
            } else {
                (0..blocks).collect()
            };
            let ids: Vec<LinearId> = model
                .linears()
                .iter()
                .enumerate()
                .filter(|(_, l)| l.block.is_some_and(|b| middle.contains(&b)))
                .map(|(i, _)| LinearId(i))
                .collect();
            let batches: Vec<Batch> = (0..score_batches)
                .map(|s| {
                    trainer
                        .dataset()
                        .batch_for_step(cfg.seed, s, cfg.batch_size)
                })
                .collect();
            let eval = trainer.dataset().eval_batches(cfg.eval_batch_size);
            let mut csv = String::from("source,mask_pct,accuracy\n");
            for source in [ScoreSource::Gradient, ScoreSource::Sensitivity] {
                let scores: HashMap<LinearId, DenseMatrix> =
                    layer_scores(&mut model, &batches, &ids, source)?;
                let name = match source {
                    ScoreSource::Gradient => "gradient",
                    ScoreSource::Sensitivity => "sensitivity",
                };
                for &pct in &pcts {
                    let acc = mask_and_eval(&model, &scores, pct, &eval)?;
                    csv.push_str(&format!("{name},{pct},{acc}\n"));
                }
            }
            fs::write(dir.join("mask.csv"), &csv)?;
            print!("{csv}");
        }
        Analyze::Memory {
            config,
            p,
            p_o,
            rank,
            galore_rank,
            out,
        } => {
            let mut input = match &config {
                Some(path) => {
                    let cfg = load(path, None)?;
                    let mut i = MemoryModelInput::from_decoder(&cfg.decoder_spec(), 8);
                    i.p = cfg.p;
                    i.p_o = cfg.p_o;
                    i
                }
                None => MemoryModelInput::llama2_7b(),
            };
            input.p = p.unwrap_or(input.p);
            input.p_o = p_o.unwrap_or(input.p_o);
            input.lora_rank = rank.unwrap_or(input.lora_rank);
            input.galore_rank = galore_rank.unwrap_or(input.galore_rank);
            let records = [PeftMethod::Lora, PeftMethod::Galore, PeftMethod::Losia]
                .into_iter()
                .map(|m| memory_model(&input, m))
                .collect::<losia::Result<Vec<_>>>()?;
            let mut csv = String::new();
            for (i, r) in records.iter().enumerate() {
                let body = r.to_csv();
                csv.push_str(if i == 0 {
                    &body
                } else {
                    body.split_once('\n').map_or("", |x| x.1)
                });
            }
            let dir = out.unwrap_or_else(|| output_dir(&TrainConfig::default(), "memory"));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("memory.csv"), &csv)?;
            fs::write(
                dir.join("memory.json"),
                serde_json::to_string_pretty(&json!({ "input": input, "records": records }))?,
            )?;
            print!("{csv}");
        }
        Analyze::Cl { matrix, out } => {
            let m = read_cl_matrix(&matrix)?;
            let metrics = cl_json(&m);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(
                    dir.join("cl_metrics.json"),
                    serde_json::to_string_pretty(&metrics)?,
                )?;
            }
            // Keep the typed path exercised so errors surface in one place.
            if m.tasks() >= 2 {
                cl_metrics(&m)?;
            }
            println!("{metrics}");
        }
    }
    Ok(())
}

/// Reads an (N+1) × N matrix. A header row is expected; a leading `stage`
/// column, as written by `continual`, is skipped.
fn read_cl_matrix(path: &Path) -> Result<ClMatrix> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let skip = usize::from(
        reader
            .headers()?
            .get(0)
            .is_some_and(|h| h.trim() == "stage"),
    );
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(skip)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad number '{v}'"))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(ClMatrix::new(rows)?)
}

/// Reads a headerless CSV of numbers into a matrix.
fn read_scores(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec?;
        if cols.is_some_and(|c| c != rec.len()) {
            bail!(
                "row {rows} of {} has {} values, expected {}",
                path.display(),
                rec.len(),
                cols.unwrap_or(0)
            );
        }
        cols = Some(rec.len());
        for v in rec.iter() {
            data.push(
                v.parse::<f64>()
                    .with_context(|| format!("bad number '{v}'"))?,
            );
        }
        rows += 1;
    }
    let cols = cols.context("score matrix is empty")?;
    Ok(DenseMatrix::new(rows, cols, data)?)
}

fn select(path: &Path, p: f64, strategy: SelectStrategy, out: Option<PathBuf>) -> Result<()> {
    let q = read_scores(path)?;
    let rf = RankFactor::uniform(p)?;
    let (subnet, strategy) = match strategy {
        SelectStrategy::Best => {
            let s = select_best(&q, rf)?;
            (s.subnet, s.strategy)
        }
        SelectStrategy::Row2column => (row2column(&q, rf)?, Strategy::RowMajor),
        SelectStrategy::Column2row => (column2row(&q, rf)?, Strategy::ColumnMajor),
        SelectStrategy::Exhaustive => (brute_force_subnet(&q, rf)?.subnet, Strategy::Exhaustive),
        SelectStrategy::Output => (output_layer_subnet(&q, p)?, Strategy::OutputColumns),
    };
    let score = subnet_score(&q, &subnet)?;
    let doc = json!({
        "x_s": subnet.rows,
        "y_s": subnet.cols,
        "score": score,
        "strategy": strategy.to_string(),
    });
    emit(
        out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&doc)?),
    )
}
