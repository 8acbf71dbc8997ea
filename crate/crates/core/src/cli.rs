//! Command-line front end.
//!
//! Settings are resolved as command-line flags over the `--config` TOML file
//! over built-in defaults. The dataset location falls back to
//! `MGNET_DATA_DIR` when neither flag nor file names one. Every command
//! writes the resolved configuration to `run_config.toml` in its output
//! directory.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic, load_tracks, split_dataset, write_jsonl, DataFormat, DatasetSplit, Motion, SplitManifest,
    SplitSpec, SynthConfig, Track,
};
use crate::evaluation::{
    average_reports, evaluate_model, evaluate_predictor, ConstantVelocity, EvalConfig, LinearFit, MetricReport,
    ModelPredictor, WindowConfig, WindowSplits,
};
use crate::experiments::{run_ablation, run_exploration, write_train_log, ExperimentRow, ExperimentSpec};
use crate::model::{Mgnet, ModelConfig};
use crate::plot::{plot_trajectories, PlotConfig};
use crate::training::{fit, TrainConfig};

pub const DATA_DIR_ENV: &str = "MGNET_DATA_DIR";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const MANIFEST_FILE: &str = "split.json";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    /// Label written into result tables.
    pub name: String,
    pub split: SplitSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DataFormat::Jsonl,
            name: "synthetic".into(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataSection,
    pub windows: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            data: DataSection::default(),
            windows: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Copies the window lengths into the model section and checks every part.
    pub fn finalize(&mut self) -> anyhow::Result<()> {
        self.model.obs_len = self.windows.obs_len;
        self.model.pred_len = self.windows.pred_len;
        self.windows.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.split.validate()?;
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.eval.batch_size == 0 {
            bail!("evaluation batch size must be at least 1");
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)?;
        std::fs::write(dir.join(RUN_CONFIG_FILE), text)?;
        Ok(())
    }

    pub fn data_path(&self) -> anyhow::Result<PathBuf> {
        if let Some(p) = &self.data.path {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => bail!("no dataset given: pass --data, set data.path in the config file, or set {DATA_DIR_ENV}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mgnet", version, about = "Multi-stage goal-driven pedestrian trajectory prediction")]
pub struct Cli {
    /// TOML configuration file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw annotations to canonical JSONL plus a split manifest.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus in canonical form.
    Synth(SynthArgs),
    /// Train one model and keep the best checkpoint.
    Train(TrainArgs),
    /// Score checkpoints and reference predictors on the test split.
    Eval(EvalArgs),
    /// Train and score the four component combinations.
    Ablate(ExperimentArgs),
    /// Train and score the full model for several stage counts.
    Explore(ExploreArgs),
    /// Render predictions of a checkpoint as PNG files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Annotation file or directory.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the video-level split.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tracks: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long, value_enum)]
    pub motion: Option<Motion>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Dataset file or directory (defaults to $MGNET_DATA_DIR).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset label used in result tables.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub obs_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
    /// Number of stage goals.
    #[arg(long)]
    pub goals: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_evaluator: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Start-frame stride of training windows.
    #[arg(long)]
    pub train_stride: Option<usize>,
    /// Start-frame stride of validation and test windows.
    #[arg(long)]
    pub eval_stride: Option<usize>,
    /// Comma-separated training seeds, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated checkpoints; their reports are averaged.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Stochastic prior draws to average instead of prior-mean decoding.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Also write per-step predictions of the first checkpoint as JSONL.
    #[arg(long)]
    pub predictions: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated stage counts.
    #[arg(long = "k-list", value_delimiter = ',', default_value = "1,3,9,15,45")]
    pub k_list: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of test windows to render.
    #[arg(long, default_value_t = 10)]
    pub limit: usize,
}

fn base_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(f) = self.format {
            cfg.data.format = f;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(n) = &self.name {
            cfg.data.name = n.clone();
        }
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let w = &mut cfg.windows;
        w.obs_len = self.obs_len.unwrap_or(w.obs_len);
        w.pred_len = self.pred_len.unwrap_or(w.pred_len);
        w.train_stride = self.train_stride.unwrap_or(w.train_stride);
        w.eval_stride = self.eval_stride.unwrap_or(w.eval_stride);
        let m = &mut cfg.model;
        m.goals = self.goals.unwrap_or(m.goals);
        m.hidden_dim = self.hidden_dim.unwrap_or(m.hidden_dim);
        m.latent_dim = self.latent_dim.unwrap_or(m.latent_dim);
        if self.no_attention {
            m.use_attention = false;
        }
        if self.no_evaluator {
            m.use_evaluator = false;
        }
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.lr = self.lr.unwrap_or(t.lr);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.dropout = self.dropout.unwrap_or(t.dropout);
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
    }
}

/// Tracks at `path` split by the manifest stored beside them, or freshly by
/// `spec` when there is none.
pub fn load_split(path: &Path, format: DataFormat, spec: &SplitSpec) -> anyhow::Result<DatasetSplit> {
    let tracks = load_tracks(path, format)?;
    let dir = if path.is_dir() { Some(path) } else { path.parent() };
    let manifest = dir.map(|d| d.join(MANIFEST_FILE)).filter(|m| m.is_file());
    Ok(match manifest {
        Some(m) => {
            let manifest: SplitManifest = serde_json::from_reader(File::open(&m)?)
                .with_context(|| format!("reading {}", m.display()))?;
            DatasetSplit::from_manifest(&tracks, &manifest)
        }
        None => split_dataset(&tracks, spec)?,
    })
}

fn load_windows(cfg: &RunConfig) -> anyhow::Result<WindowSplits> {
    let path = cfg.data_path()?;
    let split = load_split(&path, cfg.data.format, &cfg.data.split)?;
    let w = cfg.windows.split_windows(&split);
    log::info!(
        "{} windows: {} train, {} val, {} test",
        path.display(),
        w.train.len(),
        w.val.len(),
        w.test.len()
    );
    Ok(w)
}

fn write_canonical(out: &Path, tracks: &[Track], spec: &SplitSpec) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    write_jsonl(tracks, &out.join(TRACKS_FILE))?;
    let split = split_dataset(tracks, spec)?;
    let mut f = File::create(out.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &split.manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn cmd_ingest(args: &IngestArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(f) = args.format {
        cfg.data.format = f;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.split_seed {
        cfg.data.split.seed = s;
    }
    cfg.data.path = Some(args.source.clone());
    cfg.finalize()?;
    let tracks = load_tracks(&args.source, cfg.data.format)?;
    write_canonical(&cfg.output_dir, &tracks, &cfg.data.split)?;
    cfg.write(&cfg.output_dir)?;
    println!("{} tracks written to {}", tracks.len(), cfg.output_dir.join(TRACKS_FILE).display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    let s = &mut cfg.synth;
    s.n_tracks = args.tracks.unwrap_or(s.n_tracks);
    s.length = args.length.unwrap_or(s.length);
    s.motion = args.motion.unwrap_or(s.motion);
    s.noise_sigma = args.noise.unwrap_or(s.noise_sigma);
    s.seed = args.seed.unwrap_or(s.seed);
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    cfg.finalize()?;
    if cfg.synth.n_tracks == 0 {
        bail!("at least one track is required");
    }
    let tracks = generate_synthetic(&cfg.synth);
    write_canonical(&cfg.output_dir, &tracks, &cfg.data.split)?;
    cfg.data.path = Some(cfg.output_dir.clone());
    cfg.write(&cfg.output_dir)?;
    println!("{} synthetic tracks written to {}", tracks.len(), cfg.output_dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    args.common.apply(&mut cfg);
    args.model.apply(&mut cfg);
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.finalize()?;
    let data = load_windows(&cfg)?;
    let seed = cfg.seeds[0];
    let out = cfg.output_dir.clone();
    cfg.write(&out)?;
    let mut model = Mgnet::new(cfg.model.clone(), DType::F32, seed)?;
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let mut log = csv::Writer::from_path(out.join("train_log.csv"))?;
    let mut log_err = None;
    let outcome = fit(&mut model, &data.train, &data.val, &train, &mut |r| {
        if let Err(e) = log.serialize(r).and_then(|_| Ok(log.flush()?)) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let path = out.join("model.safetensors");
    outcome.best.save(&path)?;
    write_train_log(&out.join("train_log.csv"), &outcome.history)?;
    println!(
        "best epoch {} (val loss {:.6}) saved to {}",
        outcome.best.meta.epoch,
        outcome.best.meta.val_loss.unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

/// Table with the two reference predictors followed by the model.
pub fn comparison_rows(dataset: &str, k: usize, seeds: &[u64], model: &MetricReport, cv: &MetricReport, lin: &MetricReport) -> Vec<ExperimentRow> {
    vec![
        ExperimentRow::from_report(dataset, "constant-velocity", 0, &[], cv),
        ExperimentRow::from_report(dataset, "linear-fit", 0, &[], lin),
        ExperimentRow::from_report(dataset, "MGNet", k, seeds, model),
    ]
}

fn cmd_eval(args: &EvalArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    args.common.apply(&mut cfg);
    if let Some(s) = args.samples {
        cfg.eval.samples = s;
    }
    let checkpoints = args
        .checkpoint
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let first = &checkpoints[0].meta;
    if checkpoints.iter().any(|c| c.meta.model != first.model) {
        bail!("checkpoints were trained with different model configurations");
    }
    cfg.model = first.model.clone();
    cfg.windows.obs_len = first.model.obs_len;
    cfg.windows.pred_len = first.model.pred_len;
    cfg.seeds = checkpoints.iter().map(|c| c.meta.init_seed).collect();
    cfg.finalize()?;
    let data = load_windows(&cfg)?;
    let out = cfg.output_dir.clone();
    cfg.write(&out)?;
    let mut reports = Vec::new();
    for (i, ck) in checkpoints.iter().enumerate() {
        let model = ck.build_model()?;
        reports.push(evaluate_model(&model, &data.test, &cfg.eval)?);
        if i == 0 && args.predictions {
            let mut p = ModelPredictor::new(&model);
            p.batch_size = cfg.eval.batch_size;
            let pred = crate::evaluation::Predictor::predict(&p, &data.test)?;
            crate::evaluation::write_predictions(&out.join("predictions.jsonl"), &data.test, &pred)?;
        }
    }
    let report = average_reports(&reports)?;
    let cv = evaluate_predictor(&ConstantVelocity, &data.test, &cfg.eval)?;
    let lin = evaluate_predictor(&LinearFit, &data.test, &cfg.eval)?;
    write_json(&out.join("report.json"), &report)?;
    let rows = comparison_rows(&cfg.data.name, cfg.model.goal_count(), &cfg.seeds, &report, &cv, &lin);
    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in &rows {
        println!(
            "{:<18} mse {:?} {:?} {:?} c_mse {:.3} cf_mse {:.3}",
            r.variant, r.mse_05, r.mse_10, r.mse_15, r.c_mse, r.cf_mse
        );
    }
    Ok(())
}

fn experiment_spec(cfg: &RunConfig) -> ExperimentSpec {
    ExperimentSpec {
        dataset: cfg.data.name.clone(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        eval: cfg.eval.clone(),
        seeds: cfg.seeds.clone(),
        out_dir: cfg.output_dir.clone(),
    }
}

fn cmd_ablate(args: &ExperimentArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    args.common.apply(&mut cfg);
    args.model.apply(&mut cfg);
    cfg.finalize()?;
    let data = load_windows(&cfg)?;
    cfg.write(&cfg.output_dir)?;
    let table = run_ablation(&experiment_spec(&cfg), &data)?;
    table.write_csv(&cfg.output_dir.join("ablation.csv"))?;
    table.write_json(&cfg.output_dir.join("ablation.json"))?;
    println!("{} rows written to {}", table.rows.len(), cfg.output_dir.join("ablation.csv").display());
    Ok(())
}

fn cmd_explore(args: &ExploreArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    args.common.apply(&mut cfg);
    args.model.apply(&mut cfg);
    cfg.finalize()?;
    for &k in &args.k_list {
        crate::data::check_stage_count(cfg.windows.pred_len, k)?;
    }
    let data = load_windows(&cfg)?;
    cfg.write(&cfg.output_dir)?;
    let table = run_exploration(&experiment_spec(&cfg), &data, &args.k_list)?;
    table.write_csv(&cfg.output_dir.join("exploration.csv"))?;
    table.write_json(&cfg.output_dir.join("exploration.json"))?;
    println!("{} rows written to {}", table.rows.len(), cfg.output_dir.join("exploration.csv").display());
    Ok(())
}

fn cmd_plot(args: &PlotArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    args.common.apply(&mut cfg);
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    cfg.model = ck.meta.model.clone();
    cfg.windows.obs_len = cfg.model.obs_len;
    cfg.windows.pred_len = cfg.model.pred_len;
    cfg.finalize()?;
    let data = load_windows(&cfg)?;
    cfg.write(&cfg.output_dir)?;
    let model = ck.build_model()?;
    let windows: Vec<_> = data.test.into_iter().take(args.limit).collect();
    let pred = model.predict_windows(&windows, cfg.eval.batch_size, crate::model::LatentMode::PriorMean, 0)?;
    let plot_cfg = PlotConfig {
        fps: cfg.eval.fps,
        ..Default::default()
    };
    let paths = plot_trajectories(&windows, &pred, &cfg.output_dir, &plot_cfg)?;
    println!("{} plots written to {}", paths.len(), cfg.output_dir.display());
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = base_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, cfg),
        Command::Synth(a) => cmd_synth(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
        Command::Ablate(a) => cmd_ablate(a, cfg),
        Command::Explore(a) => cmd_explore(a, cfg),
        Command::Plot(a) => cmd_plot(a, cfg),
    }
}

/// Flattens an error chain into one line.
pub fn one_line(e: &anyhow::Error) -> String {
    e.chain()
        .map(|c| c.to_string().replace('\n', " "))
        .collect::<Vec<_>>()
        .join(": ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nepochs = 3\n[model]\ngoals = 9\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.model.goals, 9);
    }

    #[test]
    fn flags_override_file() {
        let mut cfg: RunConfig = toml::from_str("[train]\nepochs = 3\nlr = 0.01\n").unwrap();
        let args = ModelArgs {
            epochs: Some(7),
            ..Default::default()
        };
        args.apply(&mut cfg);
        assert_eq!((cfg.train.epochs, cfg.train.lr), (7, 0.01));
    }

    #[test]
    fn finalize_rejects_bad_k() {
        let mut cfg = RunConfig::default();
        cfg.model.goals = 7;
        assert!(cfg.finalize().is_err());
    }
}
