//! Command-line front end: `synth`, `train`, `eval` and `swap`.
//!
//! Every command writes `config.txt` with the fully resolved configuration
//! next to its outputs. Metrics CSV files share one schema:
//! `method,variant,C,M,L,K,seed,metric,value`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use thiserror::Error;

use crate::baselines::BaselineKind;
use crate::data::{load_dataset, make_groups, save_dataset, DataError, GroupedDataset};
use crate::eval::{self, EvalError, MetricsReport, CSV_HEADER};
use crate::experiment::{EvalPlan, ExperimentError, Method};
use crate::model::{train, Cigmo, CigmoConfig, ModelError};
use crate::nn::{NnError, Shape};

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Usage(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::NonFinite { .. } | ModelError::Diverged { .. } | ModelError::Domain(_) => {
                CliError::Numeric(e.to_string())
            }
            ModelError::Nn(NnError::NonFiniteGradient { .. }) => CliError::Numeric(e.to_string()),
            ModelError::Nn(NnError::Config(_)) => CliError::Config(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(io),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Domain(_) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Data(d) => d.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Eval(v) => v.into(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "cigmo", version, about = "Categorical invariant generative model: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and split it by identity.
    Synth(SynthArgs),
    /// Train CIGMO or a baseline on a training split.
    Train(TrainArgs),
    /// Evaluate trained runs on a test split.
    Eval(EvalArgs),
    /// Draw shape/view swap grids and report the swapping error.
    Swap(SwapArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory (a `synth` output or a single split).
    #[arg(long)]
    pub data: PathBuf,
    /// `cigmo` or a baseline name.
    #[arg(long, conflicts_with = "baseline")]
    pub model: Option<String>,
    /// vae, mixture_vae, gvae or mlvae.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long = "C")]
    pub categories: Option<usize>,
    /// average, product or logit-average.
    #[arg(long)]
    pub combine: Option<String>,
    #[arg(long)]
    pub group_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory of a `train` run; repeat for several seeds.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Evaluate runs on this many threads (capped by CIGMO_THREADS).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

/// Thread cap from `CIGMO_THREADS` (unset: no cap).
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("CIGMO_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("CIGMO_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn resolve(common: &Common, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(common: &Common) -> Result<()> {
    let out = &common.out;
    if out.exists() && fs::read_dir(out)?.next().is_some() && !common.force {
        return Err(CliError::Usage(format!("{} exists and is not empty; pass --force to write into it", out.display())));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

/// `dir/<split>` when `dir` is a `synth` output, else `dir` itself.
fn load_split(dir: &Path, split: &str) -> Result<GroupedDataset> {
    let sub = dir.join(split);
    Ok(load_dataset(if sub.join("manifest").exists() { &sub } else { dir })?)
}

pub fn run(cli: Cli) -> Result<()> {
    thread_cap()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Swap(a) => cmd_swap(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(c) = a.classes {
        cfg.set("classes", &c.to_string())?;
    }
    cfg.protocol.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
    prepare_out(&a.common)?;
    let mut bench = cfg.protocol.benchmark(cfg.seed)?;
    if cfg.fixed_groups > 0 {
        let k = cfg.protocol.model.group_size;
        bench.train.groups = Some(make_groups(&bench.train, k, cfg.fixed_groups, cfg.seed)?);
    }
    let out = &a.common.out;
    save_dataset(&bench.train, &out.join("train"))?;
    save_dataset(&bench.test, &out.join("test"))?;
    write_config(out, &cfg)?;
    info!("wrote {} training and {} test images to {}", bench.train.len(), bench.test.len(), out.display());
    Ok(())
}

fn image_shape(ds: &GroupedDataset) -> Shape {
    Shape::Image { channels: ds.channels, height: ds.height, width: ds.width }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(m) = a.model.as_deref().or(a.baseline.as_deref()) {
        cfg.set("method", m)?;
    }
    if a.baseline.is_some() && cfg.method == Method::Cigmo {
        return Err(CliError::Config("--baseline expects vae, mixture_vae, gvae or mlvae".into()));
    }
    if let Some(c) = a.categories {
        cfg.set("categories", &c.to_string())?;
    }
    if let Some(r) = &a.combine {
        cfg.set("combine", r)?;
    }
    if let Some(k) = a.group_size {
        cfg.set("group_size", &k.to_string())?;
    }
    let ds = load_split(&a.data, "train")?;
    cfg.protocol.model.image = image_shape(&ds);
    let p = &cfg.protocol;
    let model_cfg: CigmoConfig = p.model_config(cfg.method, p.model.categories, p.model.group_size);
    model_cfg.validate()?;
    if model_cfg.group_size < 2 && matches!(cfg.method, Method::Cigmo | Method::Baseline(BaselineKind::Gvae | BaselineKind::Mlvae)) {
        return Err(CliError::Config(format!("{} needs group_size >= 2", cfg.method.name())));
    }
    prepare_out(&a.common)?;
    let out = &a.common.out;
    write_config(out, &cfg)?;
    let tc = p.train_config(&ds, cfg.seed);
    let extra = vec![("dataset".to_owned(), ds.fingerprint())];
    match train::<f32>(&ds, &model_cfg, &tc) {
        Ok((model, report)) => {
            model.save(&out.join(CHECKPOINT_FILE), cfg.method.name(), &extra)?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in report.epoch_loss.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", e + 1));
            }
            fs::write(out.join("loss.csv"), csv)?;
            info!("trained {} for {} steps", cfg.method.name(), report.steps);
            Ok(())
        }
        Err(ModelError::Diverged { epoch, step, detail, last_good }) => {
            let file = fs::File::create(out.join(LAST_GOOD_FILE))?;
            last_good.write_to(std::io::BufWriter::new(file)).map_err(ModelError::from)?;
            Err(CliError::Numeric(format!(
                "training diverged at epoch {epoch}, step {step}: {detail}; last good weights in {LAST_GOOD_FILE}"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

struct Run {
    cfg: ExperimentConfig,
    model: Cigmo<f32>,
}

fn load_run(dir: &Path) -> Result<Run> {
    let cfg = ExperimentConfig::from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let (model, _) = Cigmo::<f32>::load(&dir.join(CHECKPOINT_FILE))?;
    Ok(Run { cfg, model })
}

fn evaluate_run(dir: &Path, eval_cfg: &ExperimentConfig, test: &GroupedDataset) -> Result<Vec<MetricsReport>> {
    let run = load_run(dir)?;
    let p = &eval_cfg.protocol;
    let seed = run.cfg.seed;
    if run.model.config().image_dim() != test.image_dim() {
        return Err(CliError::Usage(format!("{} was trained on images of another size", dir.display())));
    }
    if run.model.config().categories != test.num_classes() {
        warn!(
            "{}: {} categories for {} classes, accuracy is replaced by ARI",
            dir.display(),
            run.model.config().categories,
            test.num_classes()
        );
    }
    let mut reports = vec![p.evaluate(&run.model, run.cfg.method, test, seed, EvalPlan::ALL)?];
    if run.model.config().categories == 1 {
        let k = if eval_cfg.kmeans_k == 0 { test.num_classes() } else { eval_cfg.kmeans_k };
        reports.push(p.evaluate_kmeans(&run.model, run.cfg.method, test, k, seed)?);
    }
    Ok(reports)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = resolve(&a.common, None)?;
    let test = load_split(&a.data, "test")?;
    prepare_out(&a.common)?;
    let jobs = a.jobs.max(1).min(thread_cap()?.unwrap_or(usize::MAX)).min(a.runs.len());
    let mut results: Vec<Option<Result<Vec<MetricsReport>>>> = (0..a.runs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (chunk, slots) in a.runs.chunks(a.runs.len().div_ceil(jobs)).zip(results.chunks_mut(a.runs.len().div_ceil(jobs))) {
            let (cfg, test) = (&cfg, &test);
            s.spawn(move || {
                for (dir, slot) in chunk.iter().zip(slots) {
                    *slot = Some(evaluate_run(dir, cfg, test));
                }
            });
        }
    });
    let mut text = String::new();
    let mut csv = format!("{CSV_HEADER}\n");
    for r in results {
        for report in r.expect("every run evaluated")? {
            text.push_str(&report.to_text());
            text.push('\n');
            for row in report.csv_rows() {
                csv.push_str(&row);
                csv.push('\n');
            }
        }
    }
    let out = &a.common.out;
    fs::write(out.join("metrics.txt"), text)?;
    fs::write(out.join("metrics.csv"), csv)?;
    write_config(out, &cfg)?;
    Ok(())
}

/// Binary portable graymap of `pixels` (values in [0, 1]).
pub fn write_pgm(path: &Path, pixels: &crate::nn::Matrix<f64>) -> Result<()> {
    let bytes: Vec<u8> = pixels.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(pixels.cols() as u32, pixels.rows() as u32, bytes).expect("buffer sized by the matrix");
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    let encoder = image::codecs::pnm::PnmEncoder::new(file)
        .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
    img.write_with_encoder(encoder).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn cmd_swap(a: &SwapArgs) -> Result<()> {
    let cfg = resolve(&a.common, None)?;
    let test = load_split(&a.data, "test")?;
    let run = load_run(&a.run)?;
    prepare_out(&a.common)?;
    let out = &a.common.out;
    let seed = run.cfg.seed;
    let report = eval::swapping_error(&run.model, &test, cfg.protocol.swap_pairs, seed)?;
    let mc = run.model.config();
    let prefix = format!(
        "{},{},{},{},{},{},{seed}",
        run.cfg.method.name(),
        mc.combine.as_str(),
        mc.categories,
        mc.shape_dim,
        mc.view_dim,
        mc.group_size
    );
    let mut csv = format!("{CSV_HEADER}\n");
    for c in &report.skipped {
        warn!("category {c} is degenerate; no swap grid drawn");
    }
    for s in &report.categories {
        csv.push_str(&format!("{prefix},swap_error_c{},{}\n", s.category, s.error));
        let grid = eval::swap_grid(&run.model, &test, s.category, cfg.grid, seed)?;
        write_pgm(&out.join(format!("swap_c{}.pgm", s.category)), &grid)?;
    }
    csv.push_str(&format!("{prefix},swap_error,{}\n", report.error));
    fs::write(out.join("swap.csv"), csv)?;
    write_config(out, &cfg)?;
    Ok(())
}
