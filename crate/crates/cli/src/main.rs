//! `vetime`: generate data, train, evaluate and inspect models.

mod config;
mod data;

use std::io::Write;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vetime_core::fusion::{N_EXPERTS, N_TASKS};
use vetime_core::io::{read_column_csv, read_json, write_columns_csv, write_json, write_png, ImageRecord};
use vetime_core::metrics::{score_series, MetricOptions};
use vetime_core::model::input_image;
use vetime_core::synthetic::{generate_dataset, GeneratorConfig};
use vetime_core::train::{evaluate, train, Checkpoint};

use config::{apply, ConfigFile, ModelFlags, OptimFlags};

const EXPERTS: [&str; N_EXPERTS] = ["temporal", "visual", "anomaly"];
const TASKS: [&str; N_TASKS] = ["detection", "reconstruction"];

#[derive(Parser)]
#[command(name = "vetime", version, about = "Vision-enhanced time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset (one CSV per series plus manifest.json).
    Generate(GenerateArgs),
    /// Render a series CSV to the model's canvas image (JSON, optionally PNG).
    Convert(ConvertArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score a labelled dataset with a checkpoint and report all metrics.
    Eval(EvalArgs),
    /// Write per-timestep anomaly scores and reconstructions for one series.
    Infer(InferArgs),
    /// Compute metrics for a score trace against labels.
    Score(ScoreArgs),
    /// Write the per-patch routing weights for one series as CSV.
    DumpWeights(DumpWeightsArgs),
    /// Grid over the contrastive weight, entropy weight and temperature.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_series: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    #[arg(long, env = "VETIME_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Series CSV (`t,value[,label]` or `t,v0,v1,..`).
    #[arg(long)]
    input: PathBuf,
    /// Image JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit PNG rendering.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Run configuration JSON (imaging settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Imaging strategy: full, line-plot, single-channel, no-folding or no-scaling.
    #[arg(long, value_parser = config::kebab::<vetime_core::imaging::ImagingStrategy>)]
    imaging: Option<vetime_core::imaging::ImagingStrategy>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset directory; without one the final epoch is kept.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "VETIME_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    optim: OptimFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report JSON path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    metrics: MetricFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Score CSV output (`t,score,reconstruction..`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// CSV with a `score` column.
    #[arg(long)]
    scores: PathBuf,
    /// CSV with a `label` column.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    metrics: MetricFlags,
}

#[derive(Args)]
struct MetricFlags {
    /// Threshold for the event-based metrics.
    #[arg(long)]
    threshold: Option<f64>,
    /// Largest label-softening buffer for VUS-PR.
    #[arg(long)]
    max_buffer: Option<usize>,
}

impl MetricFlags {
    fn apply(&self, mut o: MetricOptions) -> MetricOptions {
        if let Some(t) = self.threshold {
            o.event_threshold = t;
        }
        if self.max_buffer.is_some() {
            o.max_buffer = self.max_buffer;
        }
        o
    }
}

#[derive(Args)]
struct DumpWeightsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// CSV output (`patch,expert,task,weight`, plus `variable` for multivariate input).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation directory used to score every grid point.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Comma-separated contrastive loss weights.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    lambda_aw: Vec<f64>,
    /// Comma-separated entropy weights.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4")]
    lambda_e: Vec<f64>,
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    tau: Vec<f64>,
    /// Result CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "VETIME_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    optim: OptimFlags,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Convert(a) => convert(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Score(a) => score(a),
        Command::DumpWeights(a) => dump_weights(a),
        Command::Sweep(a) => sweep(a),
    }
}

/// Pretty JSON on stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.with_context(|| format!("no {what} given (flag or config paths)"))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = a.n_series {
        cfg.n_series = n;
    }
    if let Some(l) = a.min_len {
        cfg.length_range[0] = l;
    }
    if let Some(l) = a.max_len {
        cfg.length_range[1] = l;
    }
    if let Some(r) = a.anomaly_rate {
        cfg.anomaly_rate = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = generate_dataset(&cfg, &a.out)?;
    let points: usize = manifest.series.iter().map(|e| e.length).sum();
    let anomalous: usize = manifest.series.iter().map(|e| e.anomaly_points).sum();
    print_json(&serde_json::json!({
        "dir": a.out,
        "series": manifest.series.len(),
        "points": points,
        "anomaly_points": anomalous,
    }))
}

fn convert(a: ConvertArgs) -> Result<()> {
    let mut run = ConfigFile::load(a.config.as_deref())?.run;
    if let Some(i) = a.imaging {
        run.model.ablations.imaging = i;
    }
    let series = data::load_series(&a.input)?;
    let img = input_image(&run.model, &series)?;
    write_json(&a.out, &ImageRecord::from(&img))?;
    if let Some(p) = &a.png {
        write_png(p, &img)?;
    }
    print_json(&serde_json::json!({
        "t_fold": img.plan.t_fold,
        "n_cols": img.plan.n_cols,
        "n_vars": img.plan.n_vars,
    }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut run = file.run;
    apply(&mut run, &a.model, &a.optim, a.seed);
    let train_dir = require(a.train.or(file.paths.train), "training directory")?;
    let out = require(a.out.or(file.paths.checkpoint), "checkpoint path")?;
    let train_set = data::load_dataset(&train_dir)?;
    let val_set = match a.val.or(file.paths.val) {
        Some(d) => data::load_dataset(&d)?,
        None => Vec::new(),
    };
    let ck = train(&run, &train_set, &val_set)?;
    for h in &ck.history {
        let val = h.val_vus_pr.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!("epoch {:>3}  loss {:.4}  val VUS-PR {val}", h.epoch, h.train_loss);
    }
    ck.save(&out)?;
    print_json(&serde_json::json!({
        "checkpoint": out,
        "epoch": ck.epoch,
        "epochs_run": ck.history.len(),
        "val_vus_pr": ck.history[ck.epoch].val_vus_pr,
    }))
}

fn load_model(path: &Path) -> Result<(Checkpoint, vetime_core::model::VetimeModel)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.model()?;
    Ok((ck, model))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ck, model) = load_model(&a.checkpoint)?;
    let set = data::load_dataset(&a.data)?;
    let report = evaluate(&model, &set, &a.metrics.apply(ck.config.metrics))?;
    match &a.out {
        Some(p) => Ok(write_json(p, &report)?),
        None => print_json(&report),
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let (_, model) = load_model(&a.checkpoint)?;
    let series = data::load_series(&a.input)?;
    let unlabeled = vetime_core::series::MultivariateSeries::new(series.variables().to_vec(), None)?;
    let inf = model.infer(&unlabeled)?;
    let mut names = vec!["score".to_string()];
    let mut cols: Vec<&[f64]> = vec![&inf.scores];
    match inf.reconstruction.len() {
        0 => {}
        1 => names.push("reconstruction".into()),
        n => names.extend((0..n).map(|v| format!("reconstruction_v{v}"))),
    }
    cols.extend(inf.reconstruction.iter().map(|r| r.as_slice()));
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(write_columns_csv(&a.out, &names, &cols)?)
}

fn score(a: ScoreArgs) -> Result<()> {
    let scores = read_column_csv(&a.scores, &["score"])?;
    let labels: Vec<u8> = read_column_csv(&a.labels, &["label"])?
        .into_iter()
        .map(|y| match y {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => bail!("labels must be 0 or 1, got {y}"),
        })
        .collect::<Result<_>>()?;
    let m = score_series(&scores, &labels, &a.metrics.apply(MetricOptions::default()))?;
    print_json(&m)
}

fn dump_weights(a: DumpWeightsArgs) -> Result<()> {
    let (_, model) = load_model(&a.checkpoint)?;
    let series = data::load_series(&a.input)?;
    let unlabeled = vetime_core::series::MultivariateSeries::new(series.variables().to_vec(), None)?;
    let inf = model.infer(&unlabeled)?;
    if inf.router.is_empty() {
        bail!("the checkpoint does not use router fusion");
    }
    let multi = inf.router.len() > 1;
    let mut out = String::from(if multi { "variable,patch,expert,task,weight\n" } else { "patch,expert,task,weight\n" });
    for (v, w) in inf.router.iter().enumerate() {
        for (patch, cell) in w.w.iter().enumerate() {
            for (e, expert) in EXPERTS.iter().enumerate() {
                for (t, task) in TASKS.iter().enumerate() {
                    if multi {
                        write!(out, "{v},")?;
                    }
                    writeln!(out, "{patch},{expert},{task},{}", cell[e][t])?;
                }
            }
        }
    }
    std::fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut base = file.run;
    apply(&mut base, &a.model, &a.optim, a.seed);
    let train_set = data::load_dataset(&require(a.train.or(file.paths.train), "training directory")?)?;
    let val_set = data::load_dataset(&require(a.val.or(file.paths.val), "validation directory")?)?;
    let mut out = String::from("lambda_aw,lambda_e,tau,best_epoch,val_vus_pr\n");
    for &aw in &a.lambda_aw {
        for &le in &a.lambda_e {
            for &tau in &a.tau {
                let mut run = base.clone();
                run.model.loss_weights.lambda_aw = aw;
                run.model.loss_weights.lambda_e = le;
                run.model.tau = tau;
                let ck = train(&run, &train_set, &val_set)?;
                let vus = ck.history[ck.epoch].val_vus_pr.expect("validation set present");
                eprintln!("lambda_aw {aw}  lambda_e {le}  tau {tau}  val VUS-PR {vus:.4}");
                writeln!(out, "{aw},{le},{tau},{},{vus}", ck.epoch)?;
            }
        }
    }
    std::fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))
}
