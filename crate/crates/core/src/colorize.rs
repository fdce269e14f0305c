//! Color knowledge for the color stage: a pluggable 2D colorizer applied to
//! rendered luminance patches, ab histograms, cosine histogram similarity and
//! the purification filter against wide reference patches.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::field::FieldParams;
use crate::image::Image;
use crate::render::{render_patch, Camera, ColorMode, PatchSpec, RenderError, SampleCounts};
use crate::seed;

/// Half-width of the ab square covered by histograms.
pub const HIST_HALF_RANGE: f64 = 110.0;
pub const DEFAULT_HIST_BINS: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.80;
pub const DEFAULT_BASE_COUNT: usize = 5;
pub const DEFAULT_BASE_SCALE: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorizeError {
    #[error("colorizer query failed: {0}")]
    Query(String),
    #[error("colorizer timed out after {0} ms")]
    Timeout(u64),
    #[error("colorizer protocol error: {0}")]
    Protocol(String),
    #[error("histogram needs at least 2 bins per axis, got {0}")]
    Bins(usize),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histograms have different bin counts ({0} vs {1})")]
    BinMismatch(usize, usize),
    #[error("histogram has zero norm")]
    ZeroNorm,
    #[error("base set needs at least one patch")]
    EmptyBase,
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("could not colorize {wanted} base patches after {attempts} attempts")]
    BaseRetries { wanted: usize, attempts: usize },
    #[error("no camera to sample base patches from")]
    NoCameras,
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Which colorizer produced a patch, and for which query.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub colorizer: String,
    pub query: u64,
}

/// `width × height` ab values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AbPatch {
    pub width: usize,
    pub height: usize,
    pub ab: Vec<[f64; 2]>,
    pub provenance: Provenance,
}

impl AbPatch {
    pub fn uniform(width: usize, height: usize, ab: [f64; 2], provenance: Provenance) -> Self {
        Self { width, height, ab: vec![ab; width * height], provenance }
    }
}

/// A rendered luminance patch sent to a colorizer.
#[derive(Debug, Clone, Copy)]
pub struct PatchQuery<'a> {
    /// Index of the view the patch was rendered from.
    pub view: usize,
    pub size: usize,
    /// Row-major sub-pixel positions in that view.
    pub pixels: &'a [[f64; 2]],
    /// Row-major luminance in [0, 1].
    pub lum: &'a [f64],
    /// Running query counter.
    pub index: u64,
}

/// A 2D colorizer: luminance patch in, ab patch out.
pub trait Colorizer {
    fn name(&self) -> &str;
    fn colorize(&mut self, query: &PatchQuery<'_>) -> Result<AbPatch, ColorizeError>;
}

impl<C: Colorizer + ?Sized> Colorizer for &mut C {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn colorize(&mut self, query: &PatchQuery<'_>) -> Result<AbPatch, ColorizeError> {
        (**self).colorize(query)
    }
}

impl<C: Colorizer + ?Sized> Colorizer for alloc::boxed::Box<C> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn colorize(&mut self, query: &PatchQuery<'_>) -> Result<AbPatch, ColorizeError> {
        (**self).colorize(query)
    }
}

/// Ground-truth ab plus fresh zero-mean Gaussian noise per query. Stands in for
/// a learned colorizer whose answers disagree from view to view.
#[derive(Debug, Clone)]
pub struct OracleColorizer<'a> {
    ab_planes: Vec<&'a Image<[f64; 2]>>,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl<'a> OracleColorizer<'a> {
    pub fn new(ab_planes: Vec<&'a Image<[f64; 2]>>, noise_sigma: f64, rng_seed: u64) -> Self {
        let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("finite sigma"));
        Self { ab_planes, noise, rng: seed::rng(rng_seed) }
    }
}

impl Colorizer for OracleColorizer<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn colorize(&mut self, query: &PatchQuery<'_>) -> Result<AbPatch, ColorizeError> {
        let plane = self
            .ab_planes
            .get(query.view)
            .ok_or_else(|| ColorizeError::Query(format!("oracle has no view {}", query.view)))?;
        let mut ab = Vec::with_capacity(query.pixels.len());
        for p in query.pixels {
            let mut v = plane.bilinear(p[0], p[1]);
            if let Some(n) = &self.noise {
                v[0] += n.sample(&mut self.rng);
                v[1] += n.sample(&mut self.rng);
            }
            ab.push([v[0].clamp(-128.0, 128.0), v[1].clamp(-128.0, 128.0)]);
        }
        Ok(AbPatch {
            width: query.size,
            height: query.size,
            ab,
            provenance: Provenance { colorizer: String::from("oracle"), query: query.index },
        })
    }
}

/// Piecewise-linear map from luminance in [0, 1] to ab, clamped at the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteCurve {
    /// `(L, [a, b])` knots sorted by `L`.
    pub knots: Vec<(f64, [f64; 2])>,
}

impl PaletteCurve {
    pub fn constant(a: f64, b: f64) -> Self {
        Self { knots: vec![(0.0, [a, b])] }
    }

    pub fn eval(&self, l: f64) -> [f64; 2] {
        let k = &self.knots;
        if l <= k[0].0 {
            return k[0].1;
        }
        for pair in k.windows(2) {
            let ((l0, c0), (l1, c1)) = (pair[0], pair[1]);
            if l <= l1 {
                let f = if l1 > l0 { (l - l0) / (l1 - l0) } else { 1.0 };
                return [c0[0] + f * (c1[0] - c0[0]), c0[1] + f * (c1[1] - c0[1])];
            }
        }
        k[k.len() - 1].1
    }
}

impl Default for PaletteCurve {
    /// `a = 40 (L − 0.5)`, `b = 20`.
    fn default() -> Self {
        Self { knots: vec![(0.0, [-20.0, 20.0]), (1.0, [20.0, 20.0])] }
    }
}

/// Deterministic per-pixel `ab = curve(L)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PaletteColorizer {
    pub curve: PaletteCurve,
}

impl Colorizer for PaletteColorizer {
    fn name(&self) -> &str {
        "palette"
    }

    fn colorize(&mut self, query: &PatchQuery<'_>) -> Result<AbPatch, ColorizeError> {
        Ok(AbPatch {
            width: query.size,
            height: query.size,
            ab: query.lum.iter().map(|&l| self.curve.eval(l)).collect(),
            provenance: Provenance { colorizer: String::from("palette"), query: query.index },
        })
    }
}

/// Normalized `B×B` histogram over `[-110, 110]²` in ab.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    bins: usize,
    mass: Vec<f64>,
}

impl Histogram2D {
    /// Normalizes raw counts (row index = a bin, column = b bin).
    pub fn from_counts(bins: usize, counts: Vec<f64>) -> Result<Self, ColorizeError> {
        if bins < 2 {
            return Err(ColorizeError::Bins(bins));
        }
        assert_eq!(counts.len(), bins * bins, "histogram counts length");
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(ColorizeError::EmptyHistogram);
        }
        Ok(Self { bins, mass: counts.into_iter().map(|c| c / total).collect() })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn bin_of(bins: usize, v: f64) -> usize {
        let f = (v + HIST_HALF_RANGE) / (2.0 * HIST_HALF_RANGE) * bins as f64;
        (libm::floor(f).max(0.0) as usize).min(bins - 1)
    }
}

pub fn ab_histogram(patch: &AbPatch, bins: usize) -> Result<Histogram2D, ColorizeError> {
    if bins < 2 {
        return Err(ColorizeError::Bins(bins));
    }
    let mut counts = vec![0.0; bins * bins];
    for ab in &patch.ab {
        counts[Histogram2D::bin_of(bins, ab[0]) * bins + Histogram2D::bin_of(bins, ab[1])] += 1.0;
    }
    Histogram2D::from_counts(bins, counts)
}

/// Cosine similarity of two histograms.
pub fn hist_similarity(h1: &Histogram2D, h2: &Histogram2D) -> Result<f64, ColorizeError> {
    if h1.bins != h2.bins {
        return Err(ColorizeError::BinMismatch(h1.bins, h2.bins));
    }
    let dot: f64 = h1.mass.iter().zip(&h2.mass).map(|(a, b)| a * b).sum();
    let n1: f64 = h1.mass.iter().map(|a| a * a).sum();
    let n2: f64 = h2.mass.iter().map(|a| a * a).sum();
    if !(n1 > 0.0 && n2 > 0.0) {
        return Err(ColorizeError::ZeroNorm);
    }
    Ok((dot / libm::sqrt(n1 * n2)).clamp(0.0, 1.0))
}

/// Wide colorized reference patches and the acceptance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSet {
    patches: Vec<AbPatch>,
    histograms: Vec<Histogram2D>,
    threshold: f64,
    bins: usize,
}

impl BaseSet {
    pub fn new(patches: Vec<AbPatch>, threshold: f64, bins: usize) -> Result<Self, ColorizeError> {
        if patches.is_empty() {
            return Err(ColorizeError::EmptyBase);
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ColorizeError::Threshold(threshold));
        }
        let histograms = patches.iter().map(|p| ab_histogram(p, bins)).collect::<Result<_, _>>()?;
        Ok(Self { patches, histograms, threshold, bins })
    }

    pub fn patches(&self) -> &[AbPatch] {
        &self.patches
    }

    pub fn histograms(&self) -> &[Histogram2D] {
        &self.histograms
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Highest similarity between `hist` and any reference.
    pub fn best_similarity(&self, hist: &Histogram2D) -> Result<f64, ColorizeError> {
        let mut best: f64 = 0.0;
        for h in &self.histograms {
            best = best.max(hist_similarity(h, hist)?);
        }
        Ok(best)
    }

    /// Strict test `best > T`.
    pub fn accepts(&self, hist: &Histogram2D) -> bool {
        self.best_similarity(hist).is_ok_and(|s| s > self.threshold)
    }
}

/// Keeps `patch` iff its best similarity to the references exceeds the threshold.
pub fn purify(patch: AbPatch, base: &BaseSet) -> Option<AbPatch> {
    let hist = ab_histogram(&patch, base.bins).ok()?;
    base.accepts(&hist).then_some(patch)
}

/// How reference patches are sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseSettings {
    pub count: usize,
    pub scale: f64,
    pub patch_size: usize,
    pub threshold: f64,
    pub bins: usize,
    pub counts: SampleCounts,
}

impl Default for BaseSettings {
    fn default() -> Self {
        Self {
            count: DEFAULT_BASE_COUNT,
            scale: DEFAULT_BASE_SCALE,
            patch_size: 32,
            threshold: DEFAULT_THRESHOLD,
            bins: DEFAULT_HIST_BINS,
            counts: SampleCounts::default(),
        }
    }
}

/// Renders `count` luminance patches at the base scale from random cameras,
/// colorizes each once and keeps them as references. A failed query is
/// replaced by a fresh patch, up to `4·count + 8` attempts.
pub fn build_base_set(
    field: &FieldParams,
    colorizer: &mut dyn Colorizer,
    cameras: &[Camera],
    settings: &BaseSettings,
    rng_seed: u64,
) -> Result<BaseSet, ColorizeError> {
    if cameras.is_empty() {
        return Err(ColorizeError::NoCameras);
    }
    if settings.count == 0 {
        return Err(ColorizeError::EmptyBase);
    }
    let mut rng = seed::rng(rng_seed);
    let max_attempts = 4 * settings.count + 8;
    let mut patches = Vec::with_capacity(settings.count);
    let mut attempts = 0;
    while patches.len() < settings.count {
        if attempts == max_attempts {
            return Err(ColorizeError::BaseRetries { wanted: settings.count, attempts });
        }
        let view = rng.random_range(0..cameras.len());
        let cam = &cameras[view];
        let spec = random_patch(&mut rng, cam, settings.scale, settings.patch_size)?;
        let rendered = render_patch(field, cam, &spec, settings.counts, ColorMode::Off, rng.random())?;
        let query = PatchQuery {
            view,
            size: settings.patch_size,
            pixels: &rendered.pixels,
            lum: &rendered.lum,
            index: attempts as u64,
        };
        attempts += 1;
        if let Ok(p) = colorizer.colorize(&query) {
            if p.ab.len() == rendered.pixels.len() {
                patches.push(p);
            }
        }
    }
    BaseSet::new(patches, settings.threshold, settings.bins)
}

/// Patch with a uniformly random valid center for the given scale.
pub fn random_patch(rng: &mut impl Rng, cam: &Camera, scale: f64, size: usize) -> Result<PatchSpec, RenderError> {
    let outside = || RenderError::PatchOutside { u: 0.0, v: 0.0, scale, width: cam.width, height: cam.height };
    let (x0, x1) = PatchSpec::center_range(scale, size, cam.width).ok_or_else(outside)?;
    let (y0, y1) = PatchSpec::center_range(scale, size, cam.height).ok_or_else(outside)?;
    let u = x0 + rng.random::<f64>() * (x1 - x0);
    let v = y0 + rng.random::<f64>() * (y1 - y0);
    PatchSpec::new([u, v], scale, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance { colorizer: String::from("test"), query: 0 }
    }

    fn hist(bins: usize, mass: &[(usize, f64)]) -> Histogram2D {
        let mut c = vec![0.0; bins * bins];
        for &(i, m) in mass {
            c[i] = m;
        }
        Histogram2D::from_counts(bins, c).unwrap()
    }

    #[test]
    fn histogram_single_and_split_mass() {
        let p = AbPatch::uniform(4, 4, [0.0, 0.0], prov());
        let h = ab_histogram(&p, 32).unwrap();
        assert_eq!(h.mass().iter().filter(|&&m| m > 0.0).count(), 1);
        assert_eq!(h.mass().iter().copied().fold(0.0, f64::max), 1.0);

        let mut ab = vec![[-100.0, -100.0]; 8];
        ab.extend(vec![[100.0, 100.0]; 8]);
        let p = AbPatch { width: 4, height: 4, ab, provenance: prov() };
        let h = ab_histogram(&p, 32).unwrap();
        let nz: Vec<f64> = h.mass().iter().copied().filter(|&m| m > 0.0).collect();
        assert_eq!(nz, vec![0.5, 0.5]);
        assert_eq!(ab_histogram(&p, 1), Err(ColorizeError::Bins(1)));
    }

    #[test]
    fn out_of_range_values_clamp_to_edge_bins() {
        assert_eq!(Histogram2D::bin_of(32, -500.0), 0);
        assert_eq!(Histogram2D::bin_of(32, 110.0), 31);
        assert_eq!(Histogram2D::bin_of(32, 0.0), 16);
    }

    #[test]
    fn similarity_hand_cases() {
        // (1, 0) against (0.5, 0.5)
        let a = hist(2, &[(0, 1.0)]);
        let b = hist(2, &[(0, 0.5), (1, 0.5)]);
        let expected = 0.5 / libm::sqrt(0.5);
        assert!((hist_similarity(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.7071).abs() < 1e-4);
        assert_eq!(hist_similarity(&a, &a).unwrap(), 1.0);
        let c = hist(2, &[(3, 1.0)]);
        assert_eq!(hist_similarity(&a, &c).unwrap(), 0.0);
        assert_eq!(hist_similarity(&a, &hist(3, &[(0, 1.0)])), Err(ColorizeError::BinMismatch(2, 3)));
        assert_eq!(Histogram2D::from_counts(2, vec![0.0; 4]), Err(ColorizeError::EmptyHistogram));
    }

    #[test]
    fn base_set_validation() {
        assert_eq!(BaseSet::new(vec![], 0.8, 32), Err(ColorizeError::EmptyBase));
        let p = AbPatch::uniform(2, 2, [0.0, 0.0], prov());
        assert_eq!(BaseSet::new(vec![p.clone()], 1.0, 32), Err(ColorizeError::Threshold(1.0)));
        assert!(BaseSet::new(vec![p], 0.8, 32).is_ok());
    }

    #[test]
    fn palette_curves() {
        let mut c = PaletteColorizer { curve: PaletteCurve::constant(30.0, 10.0) };
        let lum = [0.1, 0.9, 0.5, 0.0];
        let px = [[0.0, 0.0]; 4];
        let q = PatchQuery { view: 0, size: 2, pixels: &px, lum: &lum, index: 7 };
        let out = c.colorize(&q).unwrap();
        assert!(out.ab.iter().all(|&v| v == [30.0, 10.0]));
        assert_eq!(out.provenance.query, 7);
        let d = PaletteCurve::default();
        assert_eq!(d.eval(0.5), [0.0, 20.0]);
        assert_eq!(d.eval(0.75), [10.0, 20.0]);
        assert_eq!(d.eval(2.0), [20.0, 20.0]);
    }

    #[test]
    fn oracle_without_noise_is_exact() {
        let plane = Image::from_vec(2, 1, vec![[10.0, -5.0], [30.0, 15.0]]);
        let mut o = OracleColorizer::new(vec![&plane], 0.0, 1);
        let px = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [1.0, 0.0]];
        let lum = [0.5; 4];
        let out = o.colorize(&PatchQuery { view: 0, size: 2, pixels: &px, lum: &lum, index: 0 }).unwrap();
        assert_eq!(out.ab, vec![[10.0, -5.0], [30.0, 15.0], [20.0, 5.0], [30.0, 15.0]]);
        assert!(o.colorize(&PatchQuery { view: 3, size: 2, pixels: &px, lum: &lum, index: 0 }).is_err());
    }
}
