//! Two-stage optimization.
//!
//! Stage 1 fits density and luminance to the L channel with a summed squared
//! error. Stage 2 leaves those grids untouched and fits the color logits: each
//! step renders a luminance patch, asks the colorizer for ab, drops the patch
//! if its ab histogram is unlike every reference patch, turns the surviving ab
//! values into soft labels and minimizes `Σ_p KL(Z_p ‖ Ẑ_p)`.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

use crate::color::{soft_label, AbBinTable, SoftLabel};
use crate::colorize::{
    ab_histogram, build_base_set, random_patch, BaseSet, BaseSettings, ColorizeError, Colorizer, PatchQuery,
};
use crate::field::{FieldError, FieldInit, FieldParams, GradBuffer};
use crate::math::{softmax_backward_into, softmax_into};
use crate::render::{
    integrate, map_indexed, render_backward, render_patch, ColorMode, Footprint, RenderError, SampleCounts,
};
use crate::scene::MultiViewDataset;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training needs at least 2 posed views, got {0}")]
    TooFewViews(usize),
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("non-finite gradient entry; optimizer step aborted")]
    NonFiniteGradient,
    #[error("colorizer unavailable after {failures} consecutive failures (last: {last})")]
    ColorizerUnavailable { failures: usize, last: String },
    #[error("field was built for {field} color bins but the table has {table}")]
    TableMismatch { field: usize, table: usize },
    #[error(transparent)]
    Base(#[from] ColorizeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub patch_size: usize,
    /// Patch scale range for the luminance stage.
    pub lum_scale_range: (f64, f64),
    /// Patch scale range for the color stage.
    pub color_scale_range: (f64, f64),
    pub lr_luminance: f64,
    pub lr_color: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub counts: SampleCounts,
    pub resolution: [usize; 3],
    pub init: FieldInit,
    pub color_mode: ColorMode,
    pub base: BaseSettings,
    pub soft_k: usize,
    pub soft_sigma: f64,
    /// Lower bound on predicted probabilities inside the log.
    pub prob_floor: f64,
    /// Color-stage samples with quadrature weight below this are skipped.
    pub min_sample_weight: f64,
    /// Consecutive colorizer failures tolerated before aborting.
    pub max_colorizer_failures: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            patches_per_epoch: 256,
            patch_size: 32,
            lum_scale_range: (0.5, 1.0),
            color_scale_range: (0.3, 0.7),
            lr_luminance: 5e-2,
            lr_color: 1e-1,
            adam: AdamConfig::default(),
            seed: 0,
            counts: SampleCounts::default(),
            resolution: [32, 32, 32],
            init: FieldInit::default(),
            color_mode: ColorMode::RenderLogits,
            base: BaseSettings::default(),
            soft_k: 5,
            soft_sigma: 5.0,
            prob_floor: 1e-8,
            min_sample_weight: 1e-4,
            max_colorizer_failures: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        if !range_ok(self.lum_scale_range) || !range_ok(self.color_scale_range) {
            return Err(TrainError::Config("patch scale range must satisfy 0 < s_min <= s_max <= 1"));
        }
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return Err(TrainError::Config("patch size must be even and at least 2"));
        }
        if self.counts.coarse == 0 {
            return Err(TrainError::Config("coarse sample count must be at least 1"));
        }
        if self.soft_k == 0 || !(self.soft_sigma > 0.0) {
            return Err(TrainError::Config("soft labels need k >= 1 and sigma > 0"));
        }
        if !(self.lr_luminance > 0.0 && self.lr_color > 0.0) {
            return Err(TrainError::Config("learning rates must be positive"));
        }
        if !(self.prob_floor > 0.0) {
            return Err(TrainError::Config("probability floor must be positive"));
        }
        Ok(())
    }
}

/// Sum of squared errors and its gradient `2 (pred − gt)`.
pub fn loss_photometric(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), gt.len(), "photometric loss operands");
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            loss += d * d;
            2.0 * d
        })
        .collect();
    (loss, grad)
}

/// `Σ_q Z_q (ln Z_q − ln max(Ẑ_q, min(floor, Z_q)))` for one pixel, writing
/// `∂/∂Ẑ` into `grad` (length Q). Bins outside the label support contribute
/// nothing. Clamping at `min(floor, Z_q)` rather than `floor` keeps the loss
/// exactly zero at `Ẑ = Z` when a label weight is itself below the floor.
pub fn kl_pixel(pred: &[f64], label: &SoftLabel, floor: f64, grad: &mut [f64]) -> f64 {
    grad.fill(0.0);
    let mut loss = 0.0;
    for &(q, z) in &label.entries {
        if z <= 0.0 {
            continue;
        }
        let p = pred[q];
        let lo = floor.min(z);
        loss += z * (libm::log(z) - libm::log(p.max(lo)));
        if p >= lo {
            grad[q] = -z / p;
        }
    }
    loss
}

/// KL form of the classification loss summed over pixels; `pred` is `P·Q`.
pub fn loss_classification(pred: &[f64], labels: &[SoftLabel], q: usize, floor: f64) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), labels.len() * q, "classification loss operands");
    let mut grad = vec![0.0; pred.len()];
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate() {
        loss += kl_pixel(&pred[i * q..(i + 1) * q], label, floor, &mut grad[i * q..(i + 1) * q]);
    }
    (loss, grad)
}

/// Which grids an optimizer step may modify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroups {
    pub density: bool,
    pub luminance: bool,
    pub logits: bool,
}

impl ParamGroups {
    pub const LUMINANCE_STAGE: ParamGroups = ParamGroups { density: true, luminance: true, logits: false };
    pub const COLOR_STAGE: ParamGroups = ParamGroups { density: false, luminance: false, logits: true };
    pub const ALL: ParamGroups = ParamGroups { density: true, luminance: true, logits: true };
}

/// Adam moments. Buffers for a grid are allocated on its first update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    m_density: Vec<f64>,
    v_density: Vec<f64>,
    m_luminance: Vec<f64>,
    v_luminance: Vec<f64>,
    m_logits: Vec<f64>,
    v_logits: Vec<f64>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn ensure(buf: &mut Vec<f64>, len: usize) {
    if buf.len() != len {
        *buf = vec![0.0; len];
    }
}

/// One Adam step with bias correction over the nodes recorded in `grads`
/// (sparse update: untouched entries keep their parameters and moments).
pub fn optimizer_step(
    params: &mut FieldParams,
    grads: &GradBuffer,
    state: &mut OptimizerState,
    lr: f64,
    groups: ParamGroups,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    let q = params.q();
    let touched = grads.touched();
    let finite = touched.iter().all(|&i| {
        (!groups.density || grads.density[i].is_finite())
            && (!groups.luminance || grads.luminance[i].is_finite())
            && (!groups.logits || grads.logits[i * q..(i + 1) * q].iter().all(|g| g.is_finite()))
    });
    if !finite {
        return Err(TrainError::NonFiniteGradient);
    }
    let n = params.voxel_count();
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    };
    if groups.density {
        ensure(&mut state.m_density, n);
        ensure(&mut state.v_density, n);
        for &i in touched {
            update(&mut params.density[i], &mut state.m_density[i], &mut state.v_density[i], grads.density[i]);
        }
    }
    if groups.luminance {
        ensure(&mut state.m_luminance, n);
        ensure(&mut state.v_luminance, n);
        for &i in touched {
            update(&mut params.luminance[i], &mut state.m_luminance[i], &mut state.v_luminance[i], grads.luminance[i]);
        }
    }
    if groups.logits {
        ensure(&mut state.m_logits, n * q);
        ensure(&mut state.v_logits, n * q);
        for &i in touched {
            for k in i * q..(i + 1) * q {
                update(&mut params.logits[k], &mut state.m_logits[k], &mut state.v_logits[k], grads.logits[k]);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Luminance,
    Color,
}

/// Outcome of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    /// `None` when the patch contributed no loss (rejected or failed query).
    pub loss: Option<f64>,
    /// Running totals for the stage.
    pub kept: usize,
    pub rejected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    pub kept: usize,
    pub rejected: usize,
    pub failed: usize,
}

/// Receives training progress. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _summary: &EpochSummary, _params: &FieldParams) {}
    /// A colorizer query failed; the patch is skipped.
    fn on_query_failure(&mut self, _step: usize, _error: &ColorizeError) {}
}

impl TrainObserver for () {}

const LUMINANCE_STREAM: u64 = 1;
const COLOR_STREAM: u64 = 2;
const BASE_STREAM: u64 = 3;

fn check_dataset(dataset: &MultiViewDataset) -> Result<(), TrainError> {
    if dataset.views.len() < 2 {
        return Err(TrainError::TooFewViews(dataset.views.len()));
    }
    Ok(())
}

/// Stage 1: fit density and luminance.
pub fn train_luminance(
    dataset: &MultiViewDataset,
    table: Arc<AbBinTable>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FieldParams, TrainError> {
    check_dataset(dataset)?;
    config.validate()?;
    let mut params = FieldParams::new(dataset.bbox, config.resolution, table, config.init)?;
    let mut grads = GradBuffer::for_field(&params);
    let mut opt = OptimizerState::new();
    let stream = seed::derive(config.seed, LUMINANCE_STREAM);
    let (lo, hi) = config.lum_scale_range;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..config.patches_per_epoch {
            let mut rng = seed::child_rng(stream, step as u64);
            let view_index = rng.random_range(0..dataset.views.len());
            let view = &dataset.views[view_index];
            let scale = lo + rng.random::<f64>() * (hi - lo);
            let spec = random_patch(&mut rng, &view.camera, scale, config.patch_size)?;
            let patch = render_patch(&params, &view.camera, &spec, config.counts, ColorMode::Off, rng.random())?;
            let gt: Vec<f64> = patch.pixels.iter().map(|p| view.lum.bilinear(p[0], p[1]) / 100.0).collect();
            let (loss, d_lum) = loss_photometric(&patch.lum, &gt);
            for (state, &g) in patch.rays.iter().zip(&d_lum) {
                if let Some(state) = state {
                    render_backward(&params, state, g, None, &mut grads);
                }
            }
            optimizer_step(&mut params, &grads, &mut opt, config.lr_luminance, ParamGroups::LUMINANCE_STAGE, &config.adam)?;
            grads.zero();
            total += loss;
            observer.on_step(&StepRecord {
                stage: Stage::Luminance,
                epoch,
                step,
                loss: Some(loss),
                kept: step + 1,
                rejected: 0,
                failed: 0,
            });
            step += 1;
        }
        let summary = EpochSummary {
            stage: Stage::Luminance,
            epoch,
            mean_loss: total / config.patches_per_epoch.max(1) as f64,
            kept: step,
            rejected: 0,
            failed: 0,
        };
        observer.on_epoch(&summary, &params);
    }
    Ok(params)
}

/// Forward/backward result of one pixel in the color stage.
struct PixelColor {
    loss: f64,
    d_logits: Vec<f64>,
    footprint: Footprint,
}

/// Stage 2: fit the color logits with density and luminance frozen.
pub fn train_color(
    params: FieldParams,
    dataset: &MultiViewDataset,
    colorizer: &mut dyn Colorizer,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FieldParams, TrainError> {
    check_dataset(dataset)?;
    config.validate()?;
    let mut params = params;
    let cameras = dataset.cameras();
    let base_settings = BaseSettings { patch_size: config.patch_size, counts: config.counts, ..config.base };
    let base = if config.epochs * config.patches_per_epoch > 0 {
        Some(build_base_set(&params, colorizer, &cameras, &base_settings, seed::derive(config.seed, BASE_STREAM))?)
    } else {
        None
    };
    let mut grads = GradBuffer::for_field(&params);
    let mut opt = OptimizerState::new();
    let stream = seed::derive(config.seed, COLOR_STREAM);
    let (lo, hi) = config.color_scale_range;
    let (mut kept, mut rejected, mut failed, mut consecutive_failures) = (0, 0, 0, 0);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut counted = 0usize;
        for _ in 0..config.patches_per_epoch {
            let base = base.as_ref().expect("base set exists when steps run");
            let mut rng = seed::child_rng(stream, step as u64);
            let view_index = rng.random_range(0..dataset.views.len());
            let view = &dataset.views[view_index];
            let scale = lo + rng.random::<f64>() * (hi - lo);
            let spec = random_patch(&mut rng, &view.camera, scale, config.patch_size)?;
            let patch = render_patch(&params, &view.camera, &spec, config.counts, ColorMode::Off, rng.random())?;
            let query = PatchQuery {
                view: view_index,
                size: config.patch_size,
                pixels: &patch.pixels,
                lum: &patch.lum,
                index: step as u64,
            };
            let loss = match colorizer.colorize(&query) {
                Err(e) => {
                    failed += 1;
                    consecutive_failures += 1;
                    observer.on_query_failure(step, &e);
                    if consecutive_failures >= config.max_colorizer_failures {
                        return Err(TrainError::ColorizerUnavailable { failures: consecutive_failures, last: e.to_string() });
                    }
                    None
                }
                Ok(colored) if colored.ab.len() != patch.pixels.len() => {
                    failed += 1;
                    consecutive_failures += 1;
                    let e = ColorizeError::Protocol("patch size mismatch".to_string());
                    observer.on_query_failure(step, &e);
                    if consecutive_failures >= config.max_colorizer_failures {
                        return Err(TrainError::ColorizerUnavailable { failures: consecutive_failures, last: e.to_string() });
                    }
                    None
                }
                Ok(colored) => {
                    consecutive_failures = 0;
                    let keep = ab_histogram(&colored, base.bins()).is_ok_and(|h| base.accepts(&h));
                    if keep {
                        kept += 1;
                        let labels: Vec<SoftLabel> = colored
                            .ab
                            .iter()
                            .map(|&ab| soft_label(ab, params.table(), config.soft_k, config.soft_sigma))
                            .collect();
                        Some(color_step(&params, &patch.rays, &labels, config, &mut grads))
                    } else {
                        rejected += 1;
                        None
                    }
                }
            };
            if let Some(l) = loss {
                optimizer_step(&mut params, &grads, &mut opt, config.lr_color, ParamGroups::COLOR_STAGE, &config.adam)?;
                grads.zero();
                total += l;
                counted += 1;
            }
            observer.on_step(&StepRecord { stage: Stage::Color, epoch, step, loss, kept, rejected, failed });
            step += 1;
        }
        let summary = EpochSummary {
            stage: Stage::Color,
            epoch,
            mean_loss: if counted > 0 { total / counted as f64 } else { 0.0 },
            kept,
            rejected,
            failed,
        };
        observer.on_epoch(&summary, &params);
    }
    Ok(params)
}

/// Accumulates color-stage gradients for one purified patch and returns its loss.
fn color_step(
    params: &FieldParams,
    rays: &[Option<crate::render::RayRender>],
    labels: &[SoftLabel],
    config: &TrainConfig,
    grads: &mut GradBuffer,
) -> f64 {
    let q = params.q();
    match config.color_mode {
        ColorMode::RenderProbabilities => {
            let mut loss = 0.0;
            let mut d_dist = vec![0.0; q];
            for (state, label) in rays.iter().zip(labels) {
                let Some(state) = state else { continue };
                let full = integrate(params, &state.ray, state.t.clone(), ColorMode::RenderProbabilities);
                if full.weight_sum() <= config.min_sample_weight {
                    continue;
                }
                loss += kl_pixel(&full.dist, label, config.prob_floor, &mut d_dist);
                render_backward(params, &full, 0.0, Some(&d_dist), grads);
            }
            loss
        }
        _ => {
            let pairs: Vec<(Option<&crate::render::RayRender>, &SoftLabel)> =
                rays.iter().map(|r| r.as_ref()).zip(labels).collect();
            let pixels: Vec<Option<PixelColor>> = map_indexed(&pairs, |_, (state, label)| {
                let state = (*state)?;
                let footprint = Footprint::from_render(params, state, config.min_sample_weight);
                if footprint.nodes.is_empty() {
                    return None;
                }
                let mut logits = vec![0.0; q];
                footprint.render_logits(params, &mut logits);
                let mut dist = vec![0.0; q];
                softmax_into(&logits, &mut dist);
                let mut d_dist = vec![0.0; q];
                let loss = kl_pixel(&dist, label, config.prob_floor, &mut d_dist);
                let mut d_logits = vec![0.0; q];
                softmax_backward_into(&dist, &d_dist, &mut d_logits);
                Some(PixelColor { loss, d_logits, footprint })
            });
            let mut loss = 0.0;
            for px in pixels.into_iter().flatten() {
                loss += px.loss;
                px.footprint.backward_logits(&px.d_logits, grads);
            }
            loss
        }
    }
}

/// Shared across checkpoints: an all-purpose base set rebuild for inspection.
pub fn rebuild_base_set(
    params: &FieldParams,
    dataset: &MultiViewDataset,
    colorizer: &mut dyn Colorizer,
    config: &TrainConfig,
) -> Result<BaseSet, TrainError> {
    let settings = BaseSettings { patch_size: config.patch_size, counts: config.counts, ..config.base };
    Ok(build_base_set(params, colorizer, &dataset.cameras(), &settings, seed::derive(config.seed, BASE_STREAM))?)
}
