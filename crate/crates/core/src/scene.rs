//! Synthetic blob scenes, orbit cameras, and posed multi-view datasets.

use alloc::vec::Vec;
use thiserror::Error;

use crate::color::{rgb_to_lab, RgbPixel};
use crate::field::Aabb;
use crate::image::Image;
use crate::math::Vec3;
use crate::render::{map_indexed, Camera, RenderError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("need at least {min} views, got {got}")]
    TooFewViews { min: usize, got: usize },
    #[error("blob {0} has a non-positive radius")]
    Radius(usize),
    #[error("blob {0} center lies outside the scene box")]
    CenterOutside(usize),
    #[error("view {index} is {got:?}, expected {expected:?}")]
    ImageSize { index: usize, expected: [usize; 2], got: [usize; 2] },
    #[error("dataset has no views")]
    Empty,
    #[error(transparent)]
    Camera(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Falloff {
    /// `peak · exp(−|x − c|² / (2 (r/2)²))`
    Gaussian,
    /// `peak` inside the ball, zero outside.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub density_peak: f64,
    pub rgb: RgbPixel,
    pub falloff: Falloff,
}

impl Blob {
    pub fn density(&self, x: Vec3) -> f64 {
        let d2 = (x - self.center).norm_squared();
        match self.falloff {
            Falloff::Gaussian => {
                let s = self.radius / 2.0;
                self.density_peak * libm::exp(-d2 / (2.0 * s * s))
            }
            Falloff::Hard => {
                if d2 <= self.radius * self.radius {
                    self.density_peak
                } else {
                    0.0
                }
            }
        }
    }
}

/// Blobs in a box over a black background.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub bbox: Aabb,
    pub blobs: Vec<Blob>,
}

impl SyntheticScene {
    pub fn new(bbox: Aabb, blobs: Vec<Blob>) -> Result<Self, SceneError> {
        for (i, b) in blobs.iter().enumerate() {
            if !(b.radius > 0.0) {
                return Err(SceneError::Radius(i));
            }
            if !bbox.contains(b.center) {
                return Err(SceneError::CenterOutside(i));
            }
        }
        Ok(Self { bbox, blobs })
    }

    /// Red, green and blue Gaussian blobs stacked along z in `[-1, 1]³`. The
    /// gaps between them keep every surface pixel's color unambiguous from
    /// the default orbit.
    pub fn three_blobs() -> Self {
        let blob = |c: [f64; 3], r: f64, rgb: [f64; 3]| Blob {
            center: Vec3::from_array(c),
            radius: r,
            density_peak: 100.0,
            rgb: RgbPixel::new(rgb[0], rgb[1], rgb[2]),
            falloff: Falloff::Gaussian,
        };
        Self {
            bbox: Aabb::cube(1.0),
            blobs: alloc::vec![
                blob([0.0, 0.0, -0.66], 0.2, [0.85, 0.25, 0.2]),
                blob([0.0, 0.0, 0.0], 0.2, [0.25, 0.7, 0.3]),
                blob([0.0, 0.0, 0.66], 0.2, [0.25, 0.35, 0.85]),
            ],
        }
    }

    /// Density and density-weighted color at `x`.
    pub fn analytic_field(&self, x: Vec3) -> (f64, RgbPixel) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for b in &self.blobs {
            let d = b.density(x);
            sigma += d;
            acc[0] += d * b.rgb.r;
            acc[1] += d * b.rgb.g;
            acc[2] += d * b.rgb.b;
        }
        if sigma > 0.0 {
            (sigma, RgbPixel::new(acc[0] / sigma, acc[1] / sigma, acc[2] / sigma))
        } else {
            (0.0, RgbPixel::BLACK)
        }
    }

    /// Midpoint-rule quadrature through one pixel: `(rgb, opacity)`.
    pub fn render_pixel(&self, camera: &Camera, px: f64, py: f64, samples: usize) -> (RgbPixel, f64) {
        let Some(ray) = camera.ray(px, py, &self.bbox) else {
            return (RgbPixel::BLACK, 0.0);
        };
        let delta = (ray.t_far - ray.t_near) / samples as f64;
        let mut trans = 1.0;
        let mut acc = [0.0; 3];
        for i in 0..samples {
            let t = ray.t_near + (i as f64 + 0.5) * delta;
            let (s, c) = self.analytic_field(ray.at(t));
            let alpha = 1.0 - libm::exp(-s * delta);
            let w = trans * alpha;
            acc[0] += w * c.r;
            acc[1] += w * c.g;
            acc[2] += w * c.b;
            trans *= 1.0 - alpha;
        }
        (RgbPixel::new(acc[0], acc[1], acc[2]).clamped(), 1.0 - trans)
    }

    /// Renders a full view: `(rgb, opacity)` images.
    pub fn render_view(&self, camera: &Camera, samples: usize) -> (Image<RgbPixel>, Image<f64>) {
        let rows: Vec<usize> = (0..camera.height).collect();
        let out = map_indexed(&rows, |_, &y| {
            (0..camera.width).map(|x| self.render_pixel(camera, x as f64, y as f64, samples)).collect::<Vec<_>>()
        });
        let flat: Vec<(RgbPixel, f64)> = out.into_iter().flatten().collect();
        (
            Image::from_vec(camera.width, camera.height, flat.iter().map(|p| p.0).collect()),
            Image::from_vec(camera.width, camera.height, flat.iter().map(|p| p.1).collect()),
        )
    }
}

/// Cameras on a circle around the box center (z up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitConfig {
    pub radius: f64,
    /// Mean elevation above the xy plane.
    pub elevation_deg: f64,
    /// Even views sit `swing` above the mean elevation, odd views below.
    pub elevation_swing_deg: f64,
    /// Azimuth of view 0; views are spaced evenly over 360°.
    pub azimuth_offset_deg: f64,
    pub fov_deg: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self { radius: 3.2, elevation_deg: 15.0, elevation_swing_deg: 10.0, azimuth_offset_deg: 0.0, fov_deg: 40.0 }
    }
}

pub fn orbit_cameras(center: Vec3, n_views: usize, orbit: &OrbitConfig, width: usize, height: usize) -> Result<Vec<Camera>, SceneError> {
    let focal = (width as f64 / 2.0) / libm::tan(orbit.fov_deg.to_radians() / 2.0);
    (0..n_views)
        .map(|i| {
            let az = (orbit.azimuth_offset_deg + 360.0 * i as f64 / n_views as f64).to_radians();
            let swing = if i % 2 == 0 { orbit.elevation_swing_deg } else { -orbit.elevation_swing_deg };
            let el = (orbit.elevation_deg + swing).to_radians();
            let eye = center
                + Vec3::new(libm::cos(el) * libm::cos(az), libm::cos(el) * libm::sin(az), libm::sin(el)) * orbit.radius;
            Camera::look_at(eye, center, Vec3::new(0.0, 0.0, 1.0), focal, width, height).map_err(SceneError::from)
        })
        .collect()
}

/// One posed view with its ground truth. `lum` holds Lab L in [0, 100].
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub rgb: Image<RgbPixel>,
    pub lum: Image<f64>,
    pub ab: Image<[f64; 2]>,
}

impl View {
    /// Derives the Lab planes from an sRGB image.
    pub fn from_rgb(camera: Camera, rgb: Image<RgbPixel>) -> Self {
        let lab = rgb.map(|&p| rgb_to_lab(p));
        Self { camera, lum: lab.map(|l| l.l), ab: lab.map(|l| [l.a, l.b]), rgb }
    }

    pub fn size(&self) -> [usize; 2] {
        [self.rgb.width, self.rgb.height]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub bbox: Aabb,
    pub views: Vec<View>,
}

impl MultiViewDataset {
    pub fn new(bbox: Aabb, views: Vec<View>) -> Result<Self, SceneError> {
        let first = views.first().ok_or(SceneError::Empty)?.size();
        for (index, v) in views.iter().enumerate() {
            let planes = [v.size(), [v.lum.width, v.lum.height], [v.ab.width, v.ab.height], [v.camera.width, v.camera.height]];
            if let Some(&got) = planes.iter().find(|&&s| s != first) {
                return Err(SceneError::ImageSize { index, expected: first, got });
            }
        }
        Ok(Self { bbox, views })
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn ab_planes(&self) -> Vec<&Image<[f64; 2]>> {
        self.views.iter().map(|v| &v.ab).collect()
    }
}

/// Renders `n_views` orbit views of the scene by dense quadrature.
pub fn generate_views(
    scene: &SyntheticScene,
    n_views: usize,
    orbit: &OrbitConfig,
    width: usize,
    height: usize,
    samples_per_ray: usize,
) -> Result<MultiViewDataset, SceneError> {
    if n_views < 2 {
        return Err(SceneError::TooFewViews { min: 2, got: n_views });
    }
    let cameras = orbit_cameras(scene.bbox.center(), n_views, orbit, width, height)?;
    let views = cameras
        .into_iter()
        .map(|cam| {
            let (rgb, _) = scene.render_view(&cam, samples_per_ray);
            View::from_rgb(cam, rgb)
        })
        .collect();
    MultiViewDataset::new(scene.bbox, views)
}
