//! Pinhole cameras, patch ray generation, stratified and importance sampling,
//! quadrature along rays and its exact backward pass.
//!
//! Quadrature over sorted depths `t_1 < … < t_M`:
//!
//! ```text
//! δ_m = t_{m+1} − t_m   (δ_M = t_far − t_M)
//! T_m = exp(−Σ_{l<m} σ_l δ_l)
//! w_m = T_m (1 − exp(−σ_m δ_m))
//! C   = Σ_m w_m c_m
//! ```
//!
//! Background past `t_far` is black. Gradients treat the sample depths as
//! constants.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::color::{decode_argmax, lab_to_rgb, LabPixel, RgbPixel};
use crate::field::{Aabb, FieldParams, GradBuffer, SampleGrad};
use crate::image::Image;
use crate::math::{softmax_backward_into, softmax_into, Mat3, Vec3};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("focal length must be positive")]
    Focal,
    #[error("camera rotation is not orthonormal (error {0:e})")]
    Rotation(f64),
    #[error("patch side must be even and at least 2, got {0}")]
    PatchSize(usize),
    #[error("patch scale must be positive, got {0}")]
    PatchScale(f64),
    #[error("patch centered at ({u}, {v}) with scale {scale} leaves the {width}x{height} image")]
    PatchOutside { u: f64, v: f64, scale: f64, width: usize, height: usize },
}

/// Pinhole camera. Camera space is x right, y down, z forward; pixel `(x, y)`
/// has its center at continuous coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Camera {
    pub fn new(focal: f64, width: usize, height: usize, rotation: Mat3, translation: Vec3) -> Result<Self, RenderError> {
        if !(focal > 0.0) {
            return Err(RenderError::Focal);
        }
        let err = rotation.orthonormality_error();
        if !(err <= 1e-6) {
            return Err(RenderError::Rotation(err));
        }
        let principal = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        Ok(Self { focal, principal, width, height, rotation, translation })
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self, RenderError> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        Self::new(focal, width, height, Mat3::from_columns(right, down, forward), eye)
    }

    /// Unit world direction through a (possibly fractional) pixel position.
    pub fn direction(&self, px: f64, py: f64) -> Vec3 {
        let d = Vec3::new((px - self.principal[0]) / self.focal, (py - self.principal[1]) / self.focal, 1.0);
        self.rotation.mul_vec(d).normalized()
    }

    /// Pixel position of a world point in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let c = self.rotation.transpose().mul_vec(p - self.translation);
        (c.z > 0.0).then(|| {
            [self.focal * c.x / c.z + self.principal[0], self.focal * c.y / c.z + self.principal[1]]
        })
    }

    /// Ray through a pixel clipped to `bbox`, or `None` if it misses.
    pub fn ray(&self, px: f64, py: f64, bbox: &Aabb) -> Option<Ray> {
        let dir = self.direction(px, py);
        bbox.intersect(self.translation, dir).map(|(t_near, t_far)| Ray { origin: self.translation, dir, t_near, t_far })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// A `K×K` patch of pixel positions `(s·x + u, s·y + v)` for
/// `x, y ∈ {−K/2, …, K/2 − 1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub center: [f64; 2],
    pub scale: f64,
    pub size: usize,
}

impl PatchSpec {
    pub fn new(center: [f64; 2], scale: f64, size: usize) -> Result<Self, RenderError> {
        if size < 2 || size % 2 != 0 {
            return Err(RenderError::PatchSize(size));
        }
        if !(scale > 0.0) {
            return Err(RenderError::PatchScale(scale));
        }
        Ok(Self { center, scale, size })
    }

    fn offsets(&self) -> impl Iterator<Item = f64> + '_ {
        let half = (self.size / 2) as i64;
        (-half..half).map(move |x| self.scale * x as f64)
    }

    /// Row-major pixel positions.
    pub fn pixels(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for dy in self.offsets() {
            for dx in self.offsets() {
                out.push([self.center[0] + dx, self.center[1] + dy]);
            }
        }
        out
    }

    /// Range of centers along an axis of length `n` that keep the patch inside.
    pub fn center_range(scale: f64, size: usize, n: usize) -> Option<(f64, f64)> {
        let lo = scale * (size / 2) as f64;
        let hi = (n as f64 - 1.0) - scale * (size / 2 - 1) as f64;
        (lo <= hi).then_some((lo, hi))
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        let inside = |c: f64, n: usize| {
            Self::center_range(self.scale, self.size, n).is_some_and(|(lo, hi)| c >= lo - 1e-9 && c <= hi + 1e-9)
        };
        inside(self.center[0], width) && inside(self.center[1], height)
    }
}

/// A patch pixel with its ray (absent when the ray misses the scene box).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRay {
    pub pixel: [f64; 2],
    pub ray: Option<Ray>,
}

pub fn sample_patch_rays(camera: &Camera, spec: &PatchSpec, bbox: &Aabb) -> Result<Vec<PatchRay>, RenderError> {
    if !spec.fits(camera.width, camera.height) {
        return Err(RenderError::PatchOutside {
            u: spec.center[0],
            v: spec.center[1],
            scale: spec.scale,
            width: camera.width,
            height: camera.height,
        });
    }
    Ok(spec.pixels().into_iter().map(|p| PatchRay { pixel: p, ray: camera.ray(p[0], p[1], bbox) }).collect())
}

/// Source of numbers in `[0, 1)` for the samplers.
pub trait UnitSource {
    fn next_unit(&mut self) -> f64;
}

impl<R: rand::RngCore + ?Sized> UnitSource for R {
    fn next_unit(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Always `1/2`: stratified samples land on interval midpoints.
#[derive(Debug, Clone, Copy, Default)]
pub struct Midpoints;

impl UnitSource for Midpoints {
    fn next_unit(&mut self) -> f64 {
        0.5
    }
}

/// Replays a fixed list, cycling.
#[derive(Debug, Clone)]
pub struct Replay<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> Replay<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        Self { values, pos: 0 }
    }
}

impl UnitSource for Replay<'_> {
    fn next_unit(&mut self) -> f64 {
        let v = self.values[self.pos % self.values.len()];
        self.pos += 1;
        v
    }
}

/// One draw per equal sub-interval of `[t_near, t_far]`.
pub fn stratified_sample(ray: &Ray, count: usize, src: &mut (impl UnitSource + ?Sized)) -> Vec<f64> {
    let span = (ray.t_far - ray.t_near) / count as f64;
    (0..count).map(|i| ray.t_near + (i as f64 + src.next_unit()) * span).collect()
}

/// Inverse-CDF sampling of the piecewise-constant density that puts mass
/// `weights[m]` on `[t_m, t_{m+1}]` (the last interval ends at `t_far`).
/// Uniform over `[t_near, t_far]` when every weight is zero. Output is sorted.
pub fn importance_sample(
    ray: &Ray,
    coarse_t: &[f64],
    weights: &[f64],
    count: usize,
    src: &mut (impl UnitSource + ?Sized),
) -> Vec<f64> {
    debug_assert_eq!(coarse_t.len(), weights.len());
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut out: Vec<f64> = Vec::with_capacity(count);
    if !(total > 0.0) {
        for _ in 0..count {
            out.push(ray.t_near + src.next_unit() * (ray.t_far - ray.t_near));
        }
    } else {
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in weights {
            acc += w.max(0.0);
            cdf.push(acc);
        }
        for _ in 0..count {
            let target = src.next_unit() * total;
            // First interval whose cumulative mass exceeds the target; it has w > 0.
            let i = cdf.partition_point(|&c| c <= target).min(weights.len() - 1);
            let before = if i == 0 { 0.0 } else { cdf[i - 1] };
            let a = coarse_t[i];
            let b = coarse_t.get(i + 1).copied().unwrap_or(ray.t_far);
            let w = weights[i].max(0.0);
            let frac = if w > 0.0 { ((target - before) / w).clamp(0.0, 1.0) } else { 0.5 };
            out.push(a + frac * (b - a));
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// How the Q-channel color head is turned into a per-pixel distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorMode {
    /// Luminance only.
    Off,
    /// Volume-render raw logits, then softmax.
    #[default]
    RenderLogits,
    /// Softmax per point, volume-render probabilities, renormalize.
    RenderProbabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleCounts {
    pub coarse: usize,
    pub fine: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { coarse: 32, fine: 32 }
    }
}

/// Forward state of one ray, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `T_m` for each sample.
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
    pub lum: f64,
    /// Rendered color channels before normalization (logits or probabilities).
    pub color: Vec<f64>,
    /// Per-pixel distribution over bins; empty when color is off.
    pub dist: Vec<f64>,
    pub mode: ColorMode,
}

impl RayRender {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Quadrature over fixed, sorted depths.
pub fn integrate(field: &FieldParams, ray: &Ray, t: Vec<f64>, mode: ColorMode) -> RayRender {
    let m = t.len();
    let q = field.q();
    let with_color = mode != ColorMode::Off;
    let mut delta = Vec::with_capacity(m);
    for i in 0..m {
        let next = if i + 1 < m { t[i + 1] } else { ray.t_far };
        delta.push((next - t[i]).max(0.0));
    }
    let mut sigma = Vec::with_capacity(m);
    let mut trans = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut color = vec![0.0; if with_color { q } else { 0 }];
    let mut point = vec![0.0; if with_color { q } else { 0 }];
    let mut probs = vec![0.0; if mode == ColorMode::RenderProbabilities { q } else { 0 }];
    let mut lum = 0.0;
    let mut optical = 0.0;
    for i in 0..m {
        let x = ray.at(t[i]);
        let corners = field.corners(x);
        let (s, l) = match &corners {
            Some(c) => {
                let (d, l) = field.raw_scalars(c);
                (crate::math::softplus(d), crate::math::sigmoid(l))
            }
            None => (0.0, 0.0),
        };
        let tr = libm::exp(-optical);
        let w = tr * (1.0 - libm::exp(-s * delta[i]));
        optical += s * delta[i];
        sigma.push(s);
        trans.push(tr);
        weights.push(w);
        lum += w * l;
        if with_color && w != 0.0 {
            match &corners {
                Some(c) => field.logits_at(c, &mut point),
                None => point.fill(0.0),
            }
            let channel: &[f64] = if mode == ColorMode::RenderProbabilities {
                softmax_into(&point, &mut probs);
                &probs
            } else {
                &point
            };
            for (acc, &v) in color.iter_mut().zip(channel) {
                *acc += w * v;
            }
        }
    }
    let dist = match mode {
        ColorMode::Off => Vec::new(),
        ColorMode::RenderLogits => {
            let mut d = vec![0.0; q];
            softmax_into(&color, &mut d);
            d
        }
        ColorMode::RenderProbabilities => normalize_or_uniform(&color),
    };
    RayRender { ray: *ray, t, delta, sigma, trans, weights, lum, color, dist, mode }
}

fn normalize_or_uniform(r: &[f64]) -> Vec<f64> {
    let total: f64 = r.iter().sum();
    if total > 1e-300 {
        r.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / r.len() as f64; r.len()]
    }
}

/// Coarse stratified pass, importance-sampled fine pass, final quadrature over
/// the merged sorted depths.
pub fn render_ray(
    field: &FieldParams,
    ray: &Ray,
    counts: SampleCounts,
    mode: ColorMode,
    src: &mut (impl UnitSource + ?Sized),
) -> RayRender {
    let coarse = stratified_sample(ray, counts.coarse.max(1), src);
    if counts.fine == 0 {
        return integrate(field, ray, coarse, mode);
    }
    let coarse_pass = integrate(field, ray, coarse, ColorMode::Off);
    let fine = importance_sample(ray, &coarse_pass.t, &coarse_pass.weights, counts.fine, src);
    let mut merged = coarse_pass.t;
    merged.extend(fine);
    merged.sort_by(f64::total_cmp);
    integrate(field, ray, merged, mode)
}

/// Accumulates exact gradients of a loss with upstream `d_lum` on the rendered
/// luminance and `d_dist` on the pixel distribution.
pub fn render_backward(field: &FieldParams, state: &RayRender, d_lum: f64, d_dist: Option<&[f64]>, grads: &mut GradBuffer) {
    let m = state.t.len();
    let q = field.q();
    let with_color = state.mode != ColorMode::Off && d_dist.is_some();
    // Gradient on the rendered color channels.
    let mut d_color = vec![0.0; if with_color { q } else { 0 }];
    if let Some(g) = d_dist.filter(|_| with_color) {
        match state.mode {
            ColorMode::RenderLogits => softmax_backward_into(&state.dist, g, &mut d_color),
            ColorMode::RenderProbabilities => {
                let total: f64 = state.color.iter().sum();
                if total > 1e-300 {
                    let inner: f64 = g.iter().zip(&state.dist).map(|(a, b)| a * b).sum();
                    for (o, &gi) in d_color.iter_mut().zip(g) {
                        *o = (gi - inner) / total;
                    }
                }
            }
            ColorMode::Off => {}
        }
    }
    let color_active = with_color && d_color.iter().any(|&v| v != 0.0);

    // Per-sample channel values, dot products with the upstream, and the
    // upstream on each sample's raw logits.
    let mut dots = vec![0.0; m];
    let mut lums = vec![0.0; m];
    let mut sample_logit_grads = vec![0.0; if color_active { m * q } else { 0 }];
    let mut point = vec![0.0; q];
    let mut probs = vec![0.0; q];
    for i in 0..m {
        let Some(c) = field.corners(state.ray.at(state.t[i])) else { continue };
        let (_, l) = field.raw_scalars(&c);
        lums[i] = crate::math::sigmoid(l);
        dots[i] = d_lum * lums[i];
        if color_active {
            field.logits_at(&c, &mut point);
            let g = &mut sample_logit_grads[i * q..(i + 1) * q];
            match state.mode {
                ColorMode::RenderLogits => {
                    dots[i] += d_color.iter().zip(&point).map(|(a, b)| a * b).sum::<f64>();
                    for (o, &d) in g.iter_mut().zip(&d_color) {
                        *o = state.weights[i] * d;
                    }
                }
                ColorMode::RenderProbabilities => {
                    softmax_into(&point, &mut probs);
                    dots[i] += d_color.iter().zip(&probs).map(|(a, b)| a * b).sum::<f64>();
                    softmax_backward_into(&probs, &d_color, g);
                    for v in g.iter_mut() {
                        *v *= state.weights[i];
                    }
                }
                ColorMode::Off => {}
            }
        }
    }

    // ∂C/∂σ_m = δ_m (T_{m+1} c_m − Σ_{j>m} w_j c_j)
    let mut suffix = 0.0;
    for i in (0..m).rev() {
        let t_next = state.trans[i] * libm::exp(-state.sigma[i] * state.delta[i]);
        let d_sigma = state.delta[i] * (t_next * dots[i] - suffix);
        suffix += state.weights[i] * dots[i];
        let upstream = SampleGrad {
            sigma: d_sigma,
            lum: state.weights[i] * d_lum,
            logits: if color_active { Some(&sample_logit_grads[i * q..(i + 1) * q]) } else { None },
        };
        field.query_backward(state.ray.at(state.t[i]), &upstream, grads);
    }
}

/// Grid nodes seen by a ray with their summed quadrature × trilinear weights.
/// With density frozen, the rendered logits are `Σ_v A_v z_v`, so color
/// forward and backward passes only touch these nodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Footprint {
    pub nodes: Vec<(usize, f64)>,
}

impl Footprint {
    /// Builds the footprint from a forward state, skipping samples whose
    /// quadrature weight is below `min_weight`.
    pub fn from_render(field: &FieldParams, state: &RayRender, min_weight: f64) -> Self {
        let mut raw: Vec<(usize, f64)> = Vec::new();
        for (i, &w) in state.weights.iter().enumerate() {
            if w <= 0.0 || w < min_weight {
                continue;
            }
            if let Some(c) = field.corners(state.ray.at(state.t[i])) {
                for (&n, &cw) in c.index.iter().zip(&c.weight) {
                    if cw != 0.0 {
                        raw.push((n, w * cw));
                    }
                }
            }
        }
        raw.sort_by_key(|e| e.0);
        let mut nodes: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
        for (n, w) in raw {
            match nodes.last_mut() {
                Some(last) if last.0 == n => last.1 += w,
                _ => nodes.push((n, w)),
            }
        }
        Self { nodes }
    }

    pub fn render_logits(&self, field: &FieldParams, out: &mut [f64]) {
        let q = field.q();
        out.fill(0.0);
        for &(n, a) in &self.nodes {
            for (o, &z) in out.iter_mut().zip(&field.logits[n * q..(n + 1) * q]) {
                *o += a * z;
            }
        }
    }

    pub fn backward_logits(&self, d_logits: &[f64], grads: &mut GradBuffer) {
        for &(n, a) in &self.nodes {
            grads.add_logits(n, a, d_logits);
        }
    }
}

/// Rendered patch with per-ray forward state.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPatch {
    pub size: usize,
    pub pixels: Vec<[f64; 2]>,
    /// Luminance in [0, 1], row-major.
    pub lum: Vec<f64>,
    /// `K·K·Q` probabilities (empty when color is off).
    pub color_dist: Vec<f64>,
    /// Forward state per pixel; `None` where the ray misses the scene box.
    pub rays: Vec<Option<RayRender>>,
}

/// Renders every ray of a patch. Ray `i` draws its samples from
/// `seed::child_rng(seed, i)`.
pub fn render_patch(
    field: &FieldParams,
    camera: &Camera,
    spec: &PatchSpec,
    counts: SampleCounts,
    mode: ColorMode,
    seed: u64,
) -> Result<RenderedPatch, RenderError> {
    let rays = sample_patch_rays(camera, spec, &field.bbox)?;
    let q = field.q();
    let states: Vec<Option<RayRender>> = map_indexed(&rays, |i, pr| {
        pr.ray.map(|ray| {
            let mut rng = seed::child_rng(seed, i as u64);
            render_ray(field, &ray, counts, mode, &mut rng)
        })
    });
    let lum = states.iter().map(|s| s.as_ref().map_or(0.0, |s| s.lum)).collect();
    let mut color_dist = Vec::new();
    if mode != ColorMode::Off {
        color_dist.reserve(states.len() * q);
        for s in &states {
            match s {
                Some(s) => color_dist.extend_from_slice(&s.dist),
                None => color_dist.extend(core::iter::repeat_n(1.0 / q as f64, q)),
            }
        }
    }
    Ok(RenderedPatch { size: spec.size, pixels: rays.iter().map(|r| r.pixel).collect(), lum, color_dist, rays: states })
}

/// Runs `f` over `items` in order, in parallel when the `parallel` feature is on.
pub(crate) fn map_indexed<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Sampling settings for full-image rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderQuality {
    pub counts: SampleCounts,
    pub mode: ColorMode,
}

impl Default for RenderQuality {
    fn default() -> Self {
        Self { counts: SampleCounts { coarse: 64, fine: 64 }, mode: ColorMode::RenderLogits }
    }
}

/// Full-image output.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    /// Luminance in [0, 1].
    pub lum: Image<f64>,
    /// Decoded ab per pixel.
    pub ab: Image<[f64; 2]>,
    pub rgb: Image<RgbPixel>,
    /// Accumulated opacity per pixel.
    pub opacity: Image<f64>,
}

/// Renders every pixel with deterministic sample placement (stratum midpoints,
/// evenly spaced CDF quantiles), decodes the argmax bin and converts
/// `(100·L, a, b)` to clamped sRGB.
pub fn render_image(field: &FieldParams, camera: &Camera, quality: &RenderQuality) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let mode = if quality.mode == ColorMode::Off { ColorMode::RenderLogits } else { quality.mode };
    let rows: Vec<usize> = (0..h).collect();
    let fine_quantiles: Vec<f64> =
        (0..quality.counts.fine).map(|i| (i as f64 + 0.5) / quality.counts.fine as f64).collect();
    let table = field.table();
    let rendered: Vec<Vec<(f64, [f64; 2], f64)>> = map_indexed(&rows, |_, &y| {
        (0..w)
            .map(|x| match camera.ray(x as f64, y as f64, &field.bbox) {
                Some(ray) => {
                    let coarse = stratified_sample(&ray, quality.counts.coarse.max(1), &mut Midpoints);
                    let state = if quality.counts.fine == 0 {
                        integrate(field, &ray, coarse, mode)
                    } else {
                        let pass = integrate(field, &ray, coarse, ColorMode::Off);
                        let fine = importance_sample(
                            &ray,
                            &pass.t,
                            &pass.weights,
                            quality.counts.fine,
                            &mut Replay::new(&fine_quantiles),
                        );
                        let mut t = pass.t;
                        t.extend(fine);
                        t.sort_by(f64::total_cmp);
                        integrate(field, &ray, t, mode)
                    };
                    let ab = decode_argmax(&state.dist, table).unwrap_or(table.center(0));
                    (state.lum, ab, state.weight_sum())
                }
                None => (0.0, table.center(0), 0.0),
            })
            .collect()
    });
    let flat: Vec<(f64, [f64; 2], f64)> = rendered.into_iter().flatten().collect();
    let lum = Image::from_vec(w, h, flat.iter().map(|p| p.0).collect());
    let ab = Image::from_vec(w, h, flat.iter().map(|p| p.1).collect());
    let opacity = Image::from_vec(w, h, flat.iter().map(|p| p.2).collect());
    let rgb = Image::from_vec(
        w,
        h,
        flat.iter()
            .map(|&(l, ab, _)| {
                lab_to_rgb(LabPixel::new((100.0 * l).clamp(0.0, 100.0), ab[0], ab[1]), true)
                    .expect("clamped conversion is total")
            })
            .collect(),
    );
    RenderedImage { lum, ab, rgb, opacity }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::AbBinTable;
    use crate::field::FieldInit;
    use alloc::sync::Arc;

    fn unit_ray() -> Ray {
        Ray { origin: Vec3::ZERO, dir: Vec3::new(0.0, 0.0, 1.0), t_near: 0.0, t_far: 2.0 }
    }

    #[test]
    fn patch_pixels_follow_the_offset_rule() {
        let p = PatchSpec::new([10.0, 10.0], 1.0, 2).unwrap();
        assert_eq!(p.pixels(), vec![[9.0, 9.0], [10.0, 9.0], [9.0, 10.0], [10.0, 10.0]]);
        let p = PatchSpec::new([10.0, 10.0], 0.5, 2).unwrap();
        assert_eq!(p.pixels(), vec![[9.5, 9.5], [10.0, 9.5], [9.5, 10.0], [10.0, 10.0]]);
        assert_eq!(PatchSpec::new([0.0, 0.0], 1.0, 3), Err(RenderError::PatchSize(3)));
        assert_eq!(PatchSpec::new([0.0, 0.0], 0.0, 4), Err(RenderError::PatchScale(0.0)));
    }

    #[test]
    fn patch_outside_image_is_rejected() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::ZERO, Vec3::new(0.0, -1.0, 0.0), 50.0, 32, 32)
            .unwrap();
        let spec = PatchSpec::new([1.0, 16.0], 1.0, 8).unwrap();
        assert!(matches!(
            sample_patch_rays(&cam, &spec, &Aabb::cube(1.0)),
            Err(RenderError::PatchOutside { .. })
        ));
        let spec = PatchSpec::new([4.0, 16.0], 1.0, 8).unwrap();
        assert_eq!(sample_patch_rays(&cam, &spec, &Aabb::cube(1.0)).unwrap().len(), 64);
    }

    #[test]
    fn stratified_midpoints_and_ordering() {
        let r = unit_ray();
        assert_eq!(stratified_sample(&r, 4, &mut Midpoints), vec![0.25, 0.75, 1.25, 1.75]);
        let one = stratified_sample(&r, 1, &mut seed::rng(3));
        assert!(one[0] >= 0.0 && one[0] <= 2.0);
        let mut rng = seed::rng(9);
        for _ in 0..100 {
            let t = stratified_sample(&r, 16, &mut rng);
            assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn importance_sampling_cases() {
        let r = unit_ray();
        // Fallback: uniform over the ray.
        let t = importance_sample(&r, &[0.0, 1.0], &[0.0, 0.0], 3, &mut Replay::new(&[0.25, 0.5, 0.75]));
        assert_eq!(t, vec![0.5, 1.0, 1.5]);
        // All mass on interval 1 = [1, 2].
        let mut rng = seed::rng(1);
        let t = importance_sample(&r, &[0.0, 1.0], &[0.0, 2.0], 50, &mut rng);
        assert!(t.iter().all(|&v| (1.0..=2.0).contains(&v)));
        // Weights (1, 3): CDF is 0.25 t on [0, 1] and 0.25 + 0.75 (t − 1) on [1, 2].
        let t = importance_sample(&r, &[0.0, 1.0], &[1.0, 3.0], 3, &mut Replay::new(&[0.125, 0.5, 0.875]));
        let expected = [0.5, 1.0 + 0.25 / 0.75, 1.0 + 0.625 / 0.75];
        for (a, b) in t.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{t:?}");
        }
    }

    fn tiny_field() -> FieldParams {
        let table = Arc::new(AbBinTable::from_centers(10.0, vec![[0.0, 0.0], [10.0, 0.0]]).unwrap());
        FieldParams::new(Aabb::cube(1.0), [2, 2, 2], table, FieldInit::default()).unwrap()
    }

    #[test]
    fn empty_space_renders_black() {
        let mut f = tiny_field();
        f.density.fill(-1e3); // softplus underflows to 0
        let ray = Ray { origin: Vec3::new(0.0, 0.0, -1.0), dir: Vec3::new(0.0, 0.0, 1.0), t_near: 0.0, t_far: 2.0 };
        let s = render_ray(&f, &ray, SampleCounts { coarse: 8, fine: 8 }, ColorMode::RenderLogits, &mut seed::rng(0));
        assert_eq!(s.lum, 0.0);
        assert!(s.weights.iter().all(|&w| w == 0.0));
        assert!(s.trans.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn opaque_first_sample_takes_everything() {
        let mut f = tiny_field();
        f.density.fill(1e4);
        f.luminance.fill(crate::math::logit(0.3));
        let ray = Ray { origin: Vec3::new(0.0, 0.0, -1.0), dir: Vec3::new(0.0, 0.0, 1.0), t_near: 0.0, t_far: 2.0 };
        let s = integrate(&f, &ray, vec![0.5, 1.0, 1.5], ColorMode::RenderLogits);
        assert!((s.weights[0] - 1.0).abs() < 1e-12);
        assert!((s.lum - 0.3).abs() < 1e-12);
    }

    #[test]
    fn two_sample_ln2_case() {
        let mut f = tiny_field();
        // δ = 1 for both samples, so σ must equal ln 2.
        f.density.fill(crate::math::softplus_inverse(core::f64::consts::LN_2));
        f.luminance.fill(40.0); // sigmoid(40) == 1 in f64
        let ray = Ray { origin: Vec3::new(0.0, 0.0, -1.0), dir: Vec3::new(0.0, 0.0, 1.0), t_near: 0.0, t_far: 2.0 };
        let s = integrate(&f, &ray, vec![0.0, 1.0], ColorMode::Off);
        assert!((s.weights[0] - 0.5).abs() < 1e-12);
        assert!((s.weights[1] - 0.25).abs() < 1e-12);
        assert!((s.lum - 0.75).abs() < 1e-9);
    }

    #[test]
    fn footprint_matches_full_quadrature() {
        let mut f = tiny_field();
        let mut rng = seed::rng(5);
        for v in f.logits.iter_mut().chain(f.density.iter_mut()) {
            *v = rng.next_unit() * 2.0 - 1.0;
        }
        let ray = Ray { origin: Vec3::new(-0.3, 0.2, -1.0), dir: Vec3::new(0.1, -0.05, 1.0).normalized(), t_near: 0.0, t_far: 1.9 };
        let s = render_ray(&f, &ray, SampleCounts { coarse: 6, fine: 6 }, ColorMode::RenderLogits, &mut rng);
        let fp = Footprint::from_render(&f, &s, 0.0);
        let mut z = vec![0.0; 2];
        fp.render_logits(&f, &mut z);
        for (a, b) in z.iter().zip(&s.color) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
