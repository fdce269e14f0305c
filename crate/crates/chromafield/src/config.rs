//! Run configuration: a flat JSON object whose keys mirror the command-line
//! flags. Every key is optional; flags override file values, and unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use chromafield_core::colorize::BaseSettings;
use chromafield_core::field::FieldInit;
use chromafield_core::render::{ColorMode, RenderQuality, SampleCounts};
use chromafield_core::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ColorizerKind {
    Oracle,
    Palette,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorModeName {
    RenderLogits,
    RenderProbabilities,
}

/// All keys of the config file. See the README for their meaning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,

    pub views: Option<usize>,
    pub held_out_views: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub gt_samples: Option<usize>,

    pub epochs: Option<usize>,
    pub patches_per_epoch: Option<usize>,
    pub patch_size: Option<usize>,
    pub lum_scale_range: Option<[f64; 2]>,
    pub color_scale_range: Option<[f64; 2]>,
    pub lr_luminance: Option<f64>,
    pub lr_color: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub coarse_samples: Option<usize>,
    pub fine_samples: Option<usize>,
    pub resolution: Option<[usize; 3]>,
    pub init_density: Option<f64>,
    pub init_luminance: Option<f64>,
    pub color_mode: Option<ColorModeName>,
    pub soft_k: Option<usize>,
    pub soft_sigma: Option<f64>,
    pub prob_floor: Option<f64>,
    pub min_sample_weight: Option<f64>,
    pub max_colorizer_failures: Option<usize>,
    pub base_count: Option<usize>,
    pub base_scale: Option<f64>,
    pub threshold: Option<f64>,
    pub hist_bins: Option<usize>,
    pub checkpoint_every: Option<usize>,

    pub colorizer: Option<ColorizerKind>,
    pub noise_sigma: Option<f64>,
    pub external_cmd: Option<String>,
    pub external_timeout_ms: Option<u64>,

    pub render_coarse_samples: Option<usize>,
    pub render_fine_samples: Option<usize>,
    pub table: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::File { path: path.into(), msg: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::File { path: path.into(), msg: e.to_string() })
    }

    /// Values set in `other` win.
    pub fn merge(mut self, other: &RunConfig) -> Self {
        let s = &mut self;
        overlay!(
            s, other, dataset, checkpoint, out, scene, seed, workers, views, held_out_views, width, height,
            gt_samples, epochs, patches_per_epoch, patch_size, lum_scale_range, color_scale_range, lr_luminance,
            lr_color, adam_beta1, adam_beta2, adam_eps, coarse_samples, fine_samples, resolution, init_density,
            init_luminance, color_mode, soft_k, soft_sigma, prob_floor, min_sample_weight, max_colorizer_failures,
            base_count, base_scale, threshold, hist_bins, checkpoint_every, colorizer, noise_sigma, external_cmd,
            external_timeout_ms, render_coarse_samples, render_fine_samples, table,
        );
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let d = TrainConfig::default();
        let base = BaseSettings {
            count: self.base_count.unwrap_or(d.base.count),
            scale: self.base_scale.unwrap_or(d.base.scale),
            threshold: self.threshold.unwrap_or(d.base.threshold),
            bins: self.hist_bins.unwrap_or(d.base.bins),
            ..d.base
        };
        let pair = |v: Option<[f64; 2]>, dflt: (f64, f64)| v.map(|[a, b]| (a, b)).unwrap_or(dflt);
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            patches_per_epoch: self.patches_per_epoch.unwrap_or(d.patches_per_epoch),
            patch_size: self.patch_size.unwrap_or(d.patch_size),
            lum_scale_range: pair(self.lum_scale_range, d.lum_scale_range),
            color_scale_range: pair(self.color_scale_range, d.color_scale_range),
            lr_luminance: self.lr_luminance.unwrap_or(d.lr_luminance),
            lr_color: self.lr_color.unwrap_or(d.lr_color),
            adam: AdamConfig {
                beta1: self.adam_beta1.unwrap_or(d.adam.beta1),
                beta2: self.adam_beta2.unwrap_or(d.adam.beta2),
                eps: self.adam_eps.unwrap_or(d.adam.eps),
            },
            seed: self.seed(),
            counts: SampleCounts {
                coarse: self.coarse_samples.unwrap_or(d.counts.coarse),
                fine: self.fine_samples.unwrap_or(d.counts.fine),
            },
            resolution: self.resolution.unwrap_or(d.resolution),
            init: FieldInit {
                density: self.init_density.unwrap_or(d.init.density),
                luminance: self.init_luminance.unwrap_or(d.init.luminance),
            },
            color_mode: match self.color_mode {
                None => d.color_mode,
                Some(ColorModeName::RenderLogits) => ColorMode::RenderLogits,
                Some(ColorModeName::RenderProbabilities) => ColorMode::RenderProbabilities,
            },
            base,
            soft_k: self.soft_k.unwrap_or(d.soft_k),
            soft_sigma: self.soft_sigma.unwrap_or(d.soft_sigma),
            prob_floor: self.prob_floor.unwrap_or(d.prob_floor),
            min_sample_weight: self.min_sample_weight.unwrap_or(d.min_sample_weight),
            max_colorizer_failures: self.max_colorizer_failures.unwrap_or(d.max_colorizer_failures),
        };
        if cfg.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be at least 1".into()));
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn render_quality(&self) -> RenderQuality {
        let d = RenderQuality::default();
        RenderQuality {
            counts: SampleCounts {
                coarse: self.render_coarse_samples.unwrap_or(d.counts.coarse),
                fine: self.render_fine_samples.unwrap_or(d.counts.fine),
            },
            mode: match self.color_mode {
                Some(ColorModeName::RenderProbabilities) => ColorMode::RenderProbabilities,
                _ => d.mode,
            },
        }
    }
}
