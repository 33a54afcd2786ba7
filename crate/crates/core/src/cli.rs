//! The `mqvtg` command line: `gen-data`, `train`, `eval`, `ablate` and
//! `analyze`. Every command writes `manifest.json` into its output
//! directory before doing any heavy work.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, SeparationStats};
use crate::autodiff::Tensor;
use crate::codebook;
use crate::data::{generate_synthetic, DataError, Dataset, SyntheticSpec, VideoSample};
use crate::metrics::MetricsReport;
use crate::model::{Fusion, Model, Placement};
use crate::trainer::{self, read_snapshots, write_snapshots, Checkpoint, CodebookInit, TrainConfig, TrainError};

pub const MANIFEST: &str = "manifest.json";
pub const LOG: &str = "log.jsonl";
pub const METRICS: &str = "metrics.json";
pub const ABLATION: &str = "ablation.csv";
pub const EMBEDDING: &str = "embedding.csv";
pub const EVOLUTION: &str = "evolution.csv";
pub const CHECKPOINT: &str = "checkpoint.mqck";
pub const SNAPSHOTS: &str = "snapshots.jsonl";
pub const SEPARATION: &str = "separation.json";

/// Environment variable capping ablation worker threads.
pub const THREADS_ENV: &str = "MQVTG_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mqvtg", version, about = "Moment quantization for video temporal grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (annotations + MQFT features).
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, log and codebook snapshots.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run an ablation matrix across seeds.
    Ablate(AblateArgs),
    /// Export latent-space maps and codebook evolution for a trained run.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON synthetic spec; missing keys take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_videos: Option<usize>,
    #[arg(long)]
    pub val_videos: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub foreground_similarity: Option<f64>,
}

/// Training-config overrides shared by `train` and `ablate`.
#[derive(Debug, Args, Default, Clone)]
pub struct ConfigOverrides {
    /// JSON training config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub placement: Option<PlacementArg>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long, value_enum)]
    pub codebook_init: Option<InitArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory written by `gen-data` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training config; defaults to the manifest next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Number of seeds (0, 1, ..).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Fixed dataset for every seed; otherwise each seed generates one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic spec used when `--data` is absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict the embedding map to one validation video.
    #[arg(long)]
    pub video: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlacementArg {
    None,
    Image,
    Clip,
    Moment,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Hard,
    Soft,
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Random,
    Selection,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

/// Ablation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Baseline, +moment quantization, +soft, +moment codebook.
    Components,
    /// Image / clip / moment quantization sites.
    Placement,
    Fusion,
    /// Random / selection / k-means codebook initialization.
    Init,
    /// Frozen / basic / projected codebook.
    Projection,
    /// Codebook sizes 512, 1024, 2048.
    Size,
    All,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::None => Placement::None,
            PlacementArg::Image => Placement::Image,
            PlacementArg::Clip => Placement::Clip,
            PlacementArg::Moment => Placement::Moment,
        }
    }
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Hard => Fusion::Hard,
            FusionArg::Soft => Fusion::Soft,
            FusionArg::Add => Fusion::Add,
            FusionArg::Concat => Fusion::Concat,
        }
    }
}

impl From<InitArg> for CodebookInit {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Random => CodebookInit::Random,
            InitArg::Selection => CodebookInit::Selection,
            InitArg::Kmeans => CodebookInit::Kmeans,
        }
    }
}

/// Record of one invocation, written before any heavy work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Resolved configuration, defaults and flags applied.
    pub resolved_config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_json(path)
    }
}

/// Parses a JSON file with the type's unknown-key policy.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config_path: Option<&Path>,
    resolved: &impl Serialize,
    seeds: Vec<u64>,
    artifacts: &[&str],
) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config_path.map(|p| p.display().to_string()),
        resolved_config: serde_json::to_value(resolved)?,
        seeds,
        output_dir: out.display().to_string(),
        artifacts: artifacts.iter().map(|a| a.to_string()).collect(),
    };
    write_json(&out.join(MANIFEST), &manifest)
}

/// Resolves a training config: flag > file > default.
pub fn resolve_train_config(o: &ConfigOverrides, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = o.placement {
        cfg.model.placement = v.into();
    }
    if let Some(v) = o.fusion {
        cfg.model.fusion = Some(v.into());
    }
    if let Some(v) = o.codebook_size {
        cfg.model.codebook_size = v;
    }
    if let Some(v) = o.codebook_init {
        cfg.codebook_init = v.into();
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_spec(path: Option<&Path>) -> Result<SyntheticSpec, CliError> {
    match path {
        Some(p) => read_json(p),
        None => Ok(SyntheticSpec::default()),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut spec = resolve_spec(a.spec.as_deref())?;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.num_videos {
        spec.num_videos = v;
    }
    if let Some(v) = a.val_videos {
        spec.val_videos = v;
    }
    if let Some(v) = a.patches {
        spec.patches = v;
    }
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = a.foreground_similarity {
        spec.foreground_similarity = v;
    }
    spec.validate()?;
    write_manifest(
        &a.out,
        "gen-data",
        a.spec.as_deref(),
        &spec,
        vec![spec.seed],
        &["train.jsonl", "val.jsonl", "features/"],
    )?;
    let data = generate_synthetic(&spec)?;
    data.dataset.save(&a.out)?;
    info!(
        "wrote {} train / {} val videos to {}",
        data.dataset.train.len(),
        data.dataset.val.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a.overrides, a.seed)?;
    write_manifest(
        &a.out,
        "train",
        a.overrides.config.as_deref(),
        &cfg,
        vec![cfg.seed],
        &[CHECKPOINT, LOG, SNAPSHOTS],
    )?;
    let data = Dataset::load(&a.data)?;
    let outcome = trainer::train(&cfg, &data.train, &data.val)?;
    outcome.best.save(&a.out.join(CHECKPOINT))?;
    let log_path = a.out.join(LOG);
    let mut log = create(&log_path)?;
    outcome.write_log(&mut log)?;
    log.flush().map_err(io_err(&log_path))?;
    let snap_path = a.out.join(SNAPSHOTS);
    let mut snaps = create(&snap_path)?;
    write_snapshots(&outcome.snapshots, &mut snaps)?;
    snaps.flush().map_err(io_err(&snap_path))?;
    info!(
        "trained {} epochs; best val map_avg {:?} at epoch {}",
        cfg.epochs, outcome.best_map_avg, outcome.best.epoch
    );
    Ok(())
}

/// Config for a checkpoint: an explicit file, else the manifest next to it.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<TrainConfig, CliError> {
    if let Some(p) = explicit {
        return read_json(p);
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest::load(&dir.join(MANIFEST))?;
    serde_json::from_value(manifest.resolved_config).map_err(|e| CliError::Config {
        path: dir.join(MANIFEST).display().to_string(),
        message: e.to_string(),
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    write_manifest(&a.out, "eval", a.config.as_deref(), &cfg, vec![cfg.seed], &[METRICS])?;
    let ck = Checkpoint::load(&a.checkpoint, &cfg)?;
    let data = Dataset::load(&a.data)?;
    let split = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let ev = trainer::evaluate(&ck.model, split, &cfg.decode)?;
    write_json(&a.out.join(METRICS), &ev.report)?;
    info!("map_avg {:.4}", ev.report.map_avg);
    Ok(())
}

/// Named config variants for one ablation family, derived from `base`.
pub fn ablation_variants(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    let full = |c: &mut TrainConfig| {
        c.model.placement = Placement::Moment;
        c.model.fusion = Some(Fusion::Soft);
        c.codebook_init = CodebookInit::Kmeans;
        c.codebook_frozen = false;
        c.projector_trainable = true;
    };
    match axis {
        Axis::Components => vec![
            with("baseline", &|c| c.model.placement = Placement::None),
            with("qatm", &|c| {
                full(c);
                c.model.fusion = Some(Fusion::Hard);
                c.codebook_init = CodebookInit::Random;
                c.projector_trainable = false;
            }),
            with("qatm+sq", &|c| {
                full(c);
                c.codebook_init = CodebookInit::Random;
                c.projector_trainable = false;
            }),
            with("qatm+sq+mc", &full),
        ],
        Axis::Placement => [Placement::Image, Placement::Clip, Placement::Moment]
            .into_iter()
            .map(|p| {
                with(p.name(), &|c| {
                    full(c);
                    c.model.placement = p;
                    c.model.fusion = None;
                })
            })
            .collect(),
        Axis::Fusion => Fusion::ALL
            .into_iter()
            .map(|f| {
                with(f.name(), &|c| {
                    full(c);
                    c.model.fusion = Some(f);
                })
            })
            .collect(),
        Axis::Init => [CodebookInit::Random, CodebookInit::Selection, CodebookInit::Kmeans]
            .into_iter()
            .map(|i| {
                with(i.name(), &|c| {
                    full(c);
                    c.codebook_init = i;
                })
            })
            .collect(),
        Axis::Projection => vec![
            with("frozen", &|c| {
                full(c);
                c.codebook_frozen = true;
                c.projector_trainable = false;
            }),
            with("basic", &|c| {
                full(c);
                c.projector_trainable = false;
            }),
            with("projected", &full),
        ],
        Axis::Size => [512, 1024, 2048]
            .into_iter()
            .map(|k| {
                with(&k.to_string(), &|c| {
                    full(c);
                    c.model.codebook_size = k;
                })
            })
            .collect(),
        Axis::All => {
            let mut all = Vec::new();
            for a in [Axis::Components, Axis::Placement, Axis::Fusion, Axis::Init, Axis::Projection, Axis::Size] {
                let tag = serde_json::to_value(a).expect("axis serializes");
                let tag = tag.as_str().expect("unit variant");
                all.extend(ablation_variants(a, base).into_iter().map(|(n, c)| (format!("{tag}/{n}"), c)));
            }
            all
        }
    }
}

/// Where each ablation seed gets its data.
#[derive(Debug, Clone)]
pub enum AblationData {
    /// One dataset shared by every seed.
    Fixed(Dataset),
    /// A fresh synthetic dataset per seed (`spec.seed` replaced by the seed).
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
    /// Foreground/background silhouette of validation encoder outputs.
    pub silhouette: f64,
}

/// Validation encoder outputs split by saliency label.
pub fn encoder_features(model: &Model, samples: &[VideoSample]) -> Result<(Tensor, Tensor), TrainError> {
    let d = model.config().d;
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for s in samples {
        let z = model.infer(s)?.z_t;
        for t in 0..z.rows() {
            if s.saliency_labels[t] > 0.0 {
                fg.extend_from_slice(z.row(t));
            } else {
                bg.extend_from_slice(z.row(t));
            }
        }
    }
    Ok((Tensor::new(&[fg.len() / d, d], fg), Tensor::new(&[bg.len() / d, d], bg)))
}

fn separation(model: &Model, samples: &[VideoSample]) -> Result<Option<SeparationStats>, CliError> {
    let (fg, bg) = encoder_features(model, samples)?;
    match analysis::separation_stats(&fg, &bg) {
        Ok(s) => Ok(Some(s)),
        Err(AnalysisError::TooFewPoints { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Worker count from `MQVTG_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates every `(variant, seed)` cell; rows come back in
/// variant-major, seed-minor order regardless of `threads`.
pub fn run_ablation(
    variants: &[(String, TrainConfig)],
    seeds: &[u64],
    data: &AblationData,
    threads: usize,
) -> Result<Vec<AblationRow>, CliError> {
    let datasets: Vec<Dataset> = match data {
        AblationData::Fixed(d) => vec![d.clone()],
        AblationData::Synthetic(spec) => seeds
            .iter()
            .map(|&seed| {
                let spec = SyntheticSpec { seed, ..spec.clone() };
                generate_synthetic(&spec).map(|s| s.dataset)
            })
            .collect::<Result<_, _>>()?,
    };
    let cells: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..seeds.len()).map(move |s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<AblationRow, CliError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_cell = |(v, s): (usize, usize)| -> Result<AblationRow, CliError> {
        let (name, base) = &variants[v];
        let cfg = TrainConfig {
            seed: seeds[s],
            ..base.clone()
        };
        let ds = &datasets[if datasets.len() == 1 { 0 } else { s }];
        let outcome = trainer::train(&cfg, &ds.train, &ds.val)?;
        let model = &outcome.best.model;
        let ev = trainer::evaluate(model, &ds.val, &cfg.decode)?;
        let silhouette = separation(model, &ds.val)?.map_or(f64::NAN, |s| s.silhouette);
        info!("{name} seed {}: map_avg {:.4}", seeds[s], ev.report.map_avg);
        Ok(AblationRow {
            variant: name.clone(),
            seed: seeds[s],
            report: ev.report,
            silhouette,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(cells[i]);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// One row per `(variant, seed)`, then a `mean±std` row per variant.
pub fn write_ablation_csv(rows: &[AblationRow], out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "variant,seed")?;
    for c in MetricsReport::CSV_COLUMNS {
        write!(out, ",{c}")?;
    }
    writeln!(out, ",silhouette")?;
    let values = |r: &AblationRow| {
        let mut v = r.report.values().to_vec();
        v.push(r.silhouette);
        v
    };
    for r in rows {
        write!(out, "{},{}", r.variant, r.seed)?;
        for v in values(r) {
            write!(out, ",{v:.6}")?;
        }
        writeln!(out)?;
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for name in order {
        let group: Vec<Vec<f64>> = rows.iter().filter(|r| r.variant == name).map(values).collect();
        write!(out, "{name},mean±std")?;
        for col in 0..group[0].len() {
            let column: Vec<f64> = group.iter().map(|g| g[col]).collect();
            let (m, s) = mean_std(&column);
            write!(out, ",{m:.6}±{s:.6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = resolve_train_config(&a.overrides, None)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let variants = ablation_variants(a.axis, &base);
    let spec = match a.data {
        Some(_) => None,
        None => Some(resolve_spec(a.spec.as_deref())?),
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        axis: Axis,
        base: &'a TrainConfig,
        variants: Vec<&'a str>,
        synthetic: Option<&'a SyntheticSpec>,
        data: Option<String>,
    }
    let resolved = Resolved {
        axis: a.axis,
        base: &base,
        variants: variants.iter().map(|(n, _)| n.as_str()).collect(),
        synthetic: spec.as_ref(),
        data: a.data.as_ref().map(|p| p.display().to_string()),
    };
    write_manifest(&a.out, "ablate", a.overrides.config.as_deref(), &resolved, seeds.clone(), &[ABLATION])?;
    let data = match (&a.data, spec) {
        (Some(dir), _) => AblationData::Fixed(Dataset::load(dir)?),
        (None, Some(spec)) => AblationData::Synthetic(spec),
        (None, None) => unreachable!("spec resolved when --data is absent"),
    };
    let rows = run_ablation(&variants, &seeds, &data, worker_threads())?;
    let path = a.out.join(ABLATION);
    let mut f = create(&path)?;
    write_ablation_csv(&rows, &mut f).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    Ok(())
}

fn analyze_cmd(a: &AnalyzeArgs) -> Result<(), CliError> {
    let ck_path = a.run.join(CHECKPOINT);
    let cfg = checkpoint_config(&ck_path, None)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        run: String,
        video: Option<&'a str>,
        config: &'a TrainConfig,
    }
    let resolved = Resolved {
        run: a.run.display().to_string(),
        video: a.video.as_deref(),
        config: &cfg,
    };
    write_manifest(&a.out, "analyze", None, &resolved, vec![cfg.seed], &[EMBEDDING, EVOLUTION, SEPARATION])?;
    let ck = Checkpoint::load(&ck_path, &cfg)?;
    let data = Dataset::load(&a.data)?;
    let videos: Vec<VideoSample> = match &a.video {
        Some(v) => {
            let found: Vec<_> = data.val.iter().filter(|s| &s.vid == v).cloned().collect();
            if found.is_empty() {
                return Err(CliError::Usage(format!("video `{v}` is not in the validation split")));
            }
            found
        }
        None => data.val.clone(),
    };
    let (fg, bg) = encoder_features(&ck.model, &videos)?;
    let codewords = match ck.model.codebook() {
        Some(cb) => {
            let ev = trainer::evaluate(&ck.model, &videos, &cfg.decode)?;
            let counts = codebook::histogram(&ev.assignments.concat(), cb.k());
            let projected = cb.project();
            let rows: Vec<Vec<f64>> = codebook::effective_codewords(&counts)
                .into_iter()
                .map(|i| projected.row(i).to_vec())
                .collect();
            if rows.is_empty() {
                Tensor::zeros(&[0, cfg.model.d])
            } else {
                Tensor::from_rows(&rows)
            }
        }
        None => Tensor::zeros(&[0, cfg.model.d]),
    };
    let map = analysis::embedding_map(&fg, &bg, &codewords)?;
    let path = a.out.join(EMBEDDING);
    let mut f = create(&path)?;
    map.write_csv(&mut f)?;
    f.flush().map_err(io_err(&path))?;

    let snaps_path = a.run.join(SNAPSHOTS);
    let snaps = if snaps_path.exists() {
        read_snapshots(&mut std::io::BufReader::new(File::open(&snaps_path).map_err(io_err(&snaps_path))?))?
    } else {
        Vec::new()
    };
    let path = a.out.join(EVOLUTION);
    let mut f = create(&path)?;
    analysis::write_evolution_csv(&analysis::evolution_report(&snaps), &mut f)?;
    f.flush().map_err(io_err(&path))?;

    let stats = separation(&ck.model, &videos)?;
    write_json(&a.out.join(SEPARATION), &stats)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
    }
}
