//! `chromafield` command line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chromafield_core::color::default_table;
use chromafield_core::colorize::{ColorizeError, Colorizer, OracleColorizer, PaletteColorizer};
use chromafield_core::metrics::{evaluate, Evaluation, MetricReport};
use chromafield_core::render::{render_image, RenderedImage};
use chromafield_core::scene::{generate_views, Blob, Falloff, OrbitConfig, SyntheticScene};
use chromafield_core::train::{train_color, train_luminance, EpochSummary, StepRecord, TrainError, TrainObserver};
use chromafield_core::{Aabb, FieldParams, Image, Vec3};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{ColorizerKind, ConfigError, RunConfig};
use crate::dataset::{load_dataset, save_dataset, save_png, view_stem, write_f32, CameraFile, DatasetError};
use crate::external::ExternalColorizer;
use crate::formats::{load_checkpoint, load_table, save_checkpoint, CheckpointMeta, CheckpointStage, FormatError};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_CHECKPOINT: i32 = 3;
pub const EXIT_STAGE_ORDER: i32 = 4;
pub const EXIT_DATASET: i32 = 5;
pub const EXIT_COLORIZER: i32 = 6;
pub const EXIT_IO: i32 = 7;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("colorizer: {0}")]
    Colorizer(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingCheckpoint(_) => EXIT_MISSING_CHECKPOINT,
            CliError::StageOrder(_) => EXIT_STAGE_ORDER,
            CliError::Dataset(_) => EXIT_DATASET,
            CliError::Colorizer(_) => EXIT_COLORIZER,
            CliError::Io(_) => EXIT_IO,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Dataset(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::TooFewViews(_) => CliError::Dataset(e.to_string()),
            TrainError::ColorizerUnavailable { .. } | TrainError::Base(_) => CliError::Colorizer(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "chromafield", version, about = "Colorized radiance fields from posed monochrome views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic blob scene into a dataset directory.
    MakeSynthetic(MakeSynthetic),
    /// Stage 1: fit density and luminance.
    TrainLum(TrainLum),
    /// Stage 2: fit color logits with density and luminance frozen.
    TrainColor(TrainColor),
    /// Render every camera of a dataset from a checkpoint.
    Render(RenderCmd),
    /// Compare rendered views with ground truth.
    Eval(EvalCmd),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeSynthetic {
    #[command(flatten)]
    pub common: Common,
    /// Scene description (JSON); the built-in three-blob scene if omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Extra views between the training poses, written to `<out>/held_out`.
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainLum {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patches_per_epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainColor {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Stage-1 checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub colorizer: Option<ColorizerKind>,
    /// Shell command of an external colorizer.
    #[arg(long)]
    pub external_cmd: Option<String>,
    /// Per-query ab noise of the oracle colorizer.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patches_per_epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose cameras are rendered.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: Common,
    /// Directory of rendered views (as written by `render`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

fn load_config(common: &Common, flags: RunConfig) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig { seed: common.seed, workers: common.workers, out: common.out.clone(), ..flags };
    let cfg = file.merge(&flags);
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        // Fails only if a pool already exists (e.g. in-process tests); the
        // existing pool is then kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing --{name}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Scene description file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub bbox: [[f64; 3]; 2],
    pub blobs: Vec<BlobSpec>,
    #[serde(default)]
    pub orbit: Option<OrbitSpec>,
    #[serde(default)]
    pub samples_per_ray: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub density_peak: f64,
    pub rgb: [f64; 3],
    #[serde(default = "default_falloff")]
    pub falloff: FalloffName,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalloffName {
    Gaussian,
    Hard,
}

fn default_falloff() -> FalloffName {
    FalloffName::Gaussian
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub radius: Option<f64>,
    pub elevation_deg: Option<f64>,
    pub elevation_swing_deg: Option<f64>,
    pub azimuth_offset_deg: Option<f64>,
    pub fov_deg: Option<f64>,
}

impl SceneSpec {
    pub fn build(&self) -> Result<(SyntheticScene, OrbitConfig), CliError> {
        let bbox = Aabb::new(Vec3::from_array(self.bbox[0]), Vec3::from_array(self.bbox[1]))
            .map_err(|e| CliError::Config(format!("scene bbox: {e}")))?;
        let blobs = self
            .blobs
            .iter()
            .map(|b| Blob {
                center: Vec3::from_array(b.center),
                radius: b.radius,
                density_peak: b.density_peak,
                rgb: chromafield_core::RgbPixel::new(b.rgb[0], b.rgb[1], b.rgb[2]),
                falloff: match b.falloff {
                    FalloffName::Gaussian => Falloff::Gaussian,
                    FalloffName::Hard => Falloff::Hard,
                },
            })
            .collect();
        let scene = SyntheticScene::new(bbox, blobs).map_err(|e| CliError::Config(format!("scene: {e}")))?;
        let d = OrbitConfig::default();
        let o = self.orbit.unwrap_or_default();
        let orbit = OrbitConfig {
            radius: o.radius.unwrap_or(d.radius),
            elevation_deg: o.elevation_deg.unwrap_or(d.elevation_deg),
            elevation_swing_deg: o.elevation_swing_deg.unwrap_or(d.elevation_swing_deg),
            azimuth_offset_deg: o.azimuth_offset_deg.unwrap_or(d.azimuth_offset_deg),
            fov_deg: o.fov_deg.unwrap_or(d.fov_deg),
        };
        Ok((scene, orbit))
    }
}

pub const DEFAULT_GT_SAMPLES: usize = 256;

/// Azimuth offset placing held-out views halfway between training views.
pub fn held_out_orbit(orbit: &OrbitConfig, train_views: usize) -> OrbitConfig {
    OrbitConfig { azimuth_offset_deg: orbit.azimuth_offset_deg + 180.0 / train_views as f64, ..*orbit }
}

fn make_synthetic(cmd: &MakeSynthetic) -> Result<(), CliError> {
    let flags = RunConfig {
        scene: cmd.scene.clone(),
        views: cmd.views,
        held_out_views: cmd.held_out,
        width: cmd.width,
        height: cmd.height,
        ..Default::default()
    };
    let cfg = load_config(&cmd.common, flags)?;
    let out = required(&cfg.out, "out")?;
    let (scene, orbit, spec_samples) = match &cfg.scene {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let spec: SceneSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let (scene, orbit) = spec.build()?;
            (scene, orbit, spec.samples_per_ray)
        }
        None => (SyntheticScene::three_blobs(), OrbitConfig::default(), None),
    };
    let views = cfg.views.unwrap_or(16);
    if views < 2 {
        return Err(CliError::Config(format!("--views must be at least 2 (training needs two posed views), got {views}")));
    }
    let (w, h) = (cfg.width.unwrap_or(64), cfg.height.unwrap_or(64));
    let samples = cfg.gt_samples.or(spec_samples).unwrap_or(DEFAULT_GT_SAMPLES);
    let dataset = generate_views(&scene, views, &orbit, w, h, samples).map_err(|e| CliError::Config(e.to_string()))?;
    save_dataset(&dataset, out).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(n) = cfg.held_out_views.filter(|&n| n > 0) {
        let held = generate_views(&scene, n.max(2), &held_out_orbit(&orbit, views), w, h, samples)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut held = held;
        held.views.truncate(n);
        save_dataset(&held, &out.join("held_out")).map_err(|e| CliError::Io(e.to_string()))?;
    }
    println!("wrote {views} views to {}", out.display());
    Ok(())
}

/// Writes one line per step to a log file and checkpoints every
/// `checkpoint_every` epochs.
struct RunLog {
    log: BufWriter<fs::File>,
    checkpoint: PathBuf,
    every: usize,
    seed: u64,
    stage: CheckpointStage,
    error: Option<CliError>,
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, r: &StepRecord) {
        let loss = r.loss.map_or_else(|| "skipped".to_string(), |l| format!("{l:.6}"));
        let res = writeln!(
            self.log,
            "epoch={} step={} loss={} kept_patches={} rejected_patches={} failed_queries={}",
            r.epoch, r.step, loss, r.kept, r.rejected, r.failed
        );
        if let Err(e) = res {
            self.error.get_or_insert(CliError::Io(e.to_string()));
        }
    }

    fn on_epoch(&mut self, s: &EpochSummary, params: &FieldParams) {
        eprintln!(
            "epoch {:>3}  mean loss {:.6}  kept {}  rejected {}  failed {}",
            s.epoch, s.mean_loss, s.kept, s.rejected, s.failed
        );
        if self.every > 0 && (s.epoch + 1) % self.every == 0 {
            let meta = CheckpointMeta { stage: self.stage, epoch: s.epoch + 1, seed: self.seed };
            if let Err(e) = save_checkpoint(params, &meta, &self.checkpoint) {
                self.error.get_or_insert(e.into());
            }
        }
    }

    fn on_query_failure(&mut self, step: usize, error: &ColorizeError) {
        eprintln!("step {step}: colorizer query failed, patch skipped: {error}");
    }
}

impl RunLog {
    fn new(out: &Path, name: &str, every: usize, seed: u64, stage: CheckpointStage) -> Result<Self, CliError> {
        create_dir(out)?;
        let log_path = out.join(format!("{name}.log"));
        let file = fs::File::create(&log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
        Ok(Self { log: BufWriter::new(file), checkpoint: out.join(format!("{name}.cnrf")), every, seed, stage, error: None })
    }

    fn finish(mut self, params: &FieldParams, epochs: usize) -> Result<PathBuf, CliError> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.log.flush()?;
        let meta = CheckpointMeta { stage: self.stage, epoch: epochs, seed: self.seed };
        save_checkpoint(params, &meta, &self.checkpoint)?;
        Ok(self.checkpoint)
    }
}

fn table_for(cfg: &RunConfig) -> Result<Arc<chromafield_core::AbBinTable>, CliError> {
    match &cfg.table {
        Some(p) => Ok(Arc::new(load_table(p).map_err(|e| CliError::Config(e.to_string()))?)),
        None => Ok(Arc::new(default_table())),
    }
}

fn train_lum(cmd: &TrainLum) -> Result<(), CliError> {
    let flags = RunConfig {
        dataset: cmd.dataset.clone(),
        epochs: cmd.epochs,
        patches_per_epoch: cmd.patches_per_epoch,
        ..Default::default()
    };
    let cfg = load_config(&cmd.common, flags)?;
    let out = required(&cfg.out, "out")?.clone();
    // Zero epochs writes the initialized field.
    let init_only = cfg.epochs == Some(0);
    let train = if init_only { RunConfig { epochs: Some(1), ..cfg.clone() } } else { cfg.clone() }.train_config()?;
    let train = chromafield_core::TrainConfig { epochs: if init_only { 0 } else { train.epochs }, ..train };
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let stage = if init_only { CheckpointStage::Init } else { CheckpointStage::Luminance };
    let mut log = RunLog::new(&out, "lum", cfg.checkpoint_every.unwrap_or(5), train.seed, stage)?;
    let params = train_luminance(&dataset, table_for(&cfg)?, &train, &mut log)?;
    let path = log.finish(&params, train.epochs)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_color_cmd(cmd: &TrainColor) -> Result<(), CliError> {
    let flags = RunConfig {
        dataset: cmd.dataset.clone(),
        checkpoint: cmd.checkpoint.clone(),
        colorizer: cmd.colorizer,
        external_cmd: cmd.external_cmd.clone(),
        noise_sigma: cmd.noise_sigma,
        epochs: cmd.epochs,
        patches_per_epoch: cmd.patches_per_epoch,
        ..Default::default()
    };
    let cfg = load_config(&cmd.common, flags)?;
    let out = required(&cfg.out, "out")?.clone();
    let train = cfg.train_config()?;
    let kind = cfg.colorizer.unwrap_or(ColorizerKind::Oracle);
    if kind == ColorizerKind::External && cfg.external_cmd.is_none() {
        return Err(CliError::Config("--colorizer external needs --external-cmd".into()));
    }
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    if !ckpt.is_file() {
        return Err(CliError::MissingCheckpoint(ckpt.clone()));
    }
    let (params, meta) = load_checkpoint(ckpt)?;
    if meta.stage == CheckpointStage::Init {
        return Err(CliError::StageOrder(format!(
            "{} holds an untrained field; run train-lum before train-color",
            ckpt.display()
        )));
    }
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let mut colorizer: Box<dyn Colorizer + '_> = match kind {
        ColorizerKind::Oracle => Box::new(OracleColorizer::new(
            dataset.ab_planes(),
            cfg.noise_sigma.unwrap_or(0.0),
            chromafield_core::seed::derive(train.seed, 0x0ac1e),
        )),
        ColorizerKind::Palette => Box::new(PaletteColorizer::default()),
        ColorizerKind::External => Box::new(ExternalColorizer::new(
            cfg.external_cmd.clone().expect("checked above"),
            Duration::from_millis(cfg.external_timeout_ms.unwrap_or(30_000)),
        )),
    };
    let mut log = RunLog::new(&out, "color", cfg.checkpoint_every.unwrap_or(5), train.seed, CheckpointStage::Color)?;
    let params = train_color(params, &dataset, &mut colorizer, &train, &mut log)?;
    let path = log.finish(&params, train.epochs)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Writes `view_%03d.png` plus L (0–100) and ab float sidecars.
pub fn write_rendered(dir: &Path, index: usize, img: &RenderedImage) -> Result<(), CliError> {
    let stem = view_stem(dir, index);
    let png = stem.with_extension("png");
    save_png(&img.rgb, &png).map_err(|e| CliError::Io(e.to_string()))?;
    let side = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    write_f32(&side(".L.f32"), img.lum.data.iter().map(|l| 100.0 * l))?;
    write_f32(&side(".ab.f32"), img.ab.data.iter().flat_map(|ab| *ab))?;
    Ok(())
}

fn render_cmd(cmd: &RenderCmd) -> Result<(), CliError> {
    let flags = RunConfig { checkpoint: cmd.checkpoint.clone(), dataset: cmd.dataset.clone(), ..Default::default() };
    let cfg = load_config(&cmd.common, flags)?;
    let out = required(&cfg.out, "out")?.clone();
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    if !ckpt.is_file() {
        return Err(CliError::MissingCheckpoint(ckpt.clone()));
    }
    let (params, _) = load_checkpoint(ckpt)?;
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    create_dir(&out)?;
    let quality = cfg.render_quality();
    let cams = dataset.cameras();
    for (i, cam) in cams.iter().enumerate() {
        write_rendered(&out, i, &render_image(&params, cam, &quality))?;
    }
    let file = CameraFile::from_cameras(&cams, &dataset.bbox);
    let path = out.join("cameras.json");
    fs::write(&path, serde_json::to_string_pretty(&file).expect("cameras serialize") + "\n")?;
    println!("rendered {} views to {}", cams.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary {
    views: usize,
    mean: ReportJson,
    per_view: Vec<ReportJson>,
}

/// `psnr` is `null` for identical images.
#[derive(Debug, Serialize)]
struct ReportJson {
    psnr: Option<f64>,
    ssim: f64,
    colorful_pred: f64,
    colorful_gt: f64,
    delta_colorful: f64,
}

impl From<&MetricReport> for ReportJson {
    fn from(r: &MetricReport) -> Self {
        Self {
            psnr: r.psnr.is_finite().then_some(r.psnr),
            ssim: r.ssim,
            colorful_pred: r.colorful_pred,
            colorful_gt: r.colorful_gt,
            delta_colorful: r.delta_colorful,
        }
    }
}

pub fn report_tsv(e: &Evaluation) -> String {
    let mut s = String::from("view\tpsnr\tssim\tcolorful_pred\tcolorful_gt\tdelta_colorful\n");
    let row = |name: String, r: &MetricReport| {
        format!("{name}\t{:.4}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n", r.psnr, r.ssim, r.colorful_pred, r.colorful_gt, r.delta_colorful)
    };
    for (i, r) in e.views.iter().enumerate() {
        s += &row(format!("{i:03}"), r);
    }
    s += &row("mean".into(), &e.mean);
    s
}

fn eval_cmd(cmd: &EvalCmd) -> Result<(), CliError> {
    let flags = RunConfig { dataset: cmd.dataset.clone(), ..Default::default() };
    let cfg = load_config(&cmd.common, flags)?;
    let out = required(&cfg.out, "out")?.clone();
    let pred = load_dataset(&cmd.pred)?;
    let gt = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let p: Vec<Image<_>> = pred.views.iter().map(|v| v.rgb.clone()).collect();
    let g: Vec<Image<_>> = gt.views.iter().map(|v| v.rgb.clone()).collect();
    let e = evaluate(&p, &g).map_err(|e| CliError::Dataset(e.to_string()))?;
    create_dir(&out)?;
    let tsv = report_tsv(&e);
    fs::write(out.join("report.tsv"), &tsv)?;
    let summary = Summary {
        views: e.views.len(),
        mean: (&e.mean).into(),
        per_view: e.views.iter().map(Into::into).collect(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    print!("{tsv}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::MakeSynthetic(c) => make_synthetic(c),
        Command::TrainLum(c) => train_lum(c),
        Command::TrainColor(c) => train_color_cmd(c),
        Command::Render(c) => render_cmd(c),
        Command::Eval(c) => eval_cmd(c),
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
