//! Image quality metrics: PSNR, single-scale SSIM, Hasler–Süsstrunk
//! colorfulness and its absolute difference.

use alloc::vec::Vec;
use thiserror::Error;

use crate::color::{rgb_to_lab, RgbPixel};
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch([usize; 2], [usize; 2]),
    #[error("image {0:?} is smaller than the 11x11 SSIM window")]
    TooSmall([usize; 2]),
    #[error("{pred} predicted views but {gt} ground-truth views")]
    Unpaired { pred: usize, gt: usize },
    #[error("no views to evaluate")]
    Empty,
}

fn check_size<T, U>(a: &Image<T>, b: &Image<U>) -> Result<(), MetricsError> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(MetricsError::SizeMismatch([a.width, a.height], [b.width, b.height]))
    }
}

/// `−10 log10(MSE)` over all channels; `+∞` for identical images.
pub fn psnr(pred: &Image<RgbPixel>, gt: &Image<RgbPixel>) -> Result<f64, MetricsError> {
    check_size(pred, gt)?;
    let mut se = 0.0;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        for (a, b) in p.to_array().into_iter().zip(g.to_array()) {
            se += (a - b) * (a - b);
        }
    }
    Ok(psnr_from_mse(se / (3 * pred.data.len()) as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(mse)
    }
}

/// PSNR of single-channel images on [0, 1].
pub fn psnr_gray(pred: &Image<f64>, gt: &Image<f64>) -> Result<f64, MetricsError> {
    check_size(pred, gt)?;
    let se: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(se / pred.data.len() as f64))
}

/// Lab lightness scaled to [0, 1].
pub fn luminance_plane(img: &Image<RgbPixel>) -> Image<f64> {
    img.map(|&p| rgb_to_lab(p).l / 100.0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(img: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = alloc::vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * img[y * width + x + k]).sum();
        }
    }
    let mut out = alloc::vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images with dynamic range 1.
pub fn ssim(pred: &Image<f64>, gt: &Image<f64>) -> Result<f64, MetricsError> {
    check_size(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall([w, h]));
    }
    let win = gaussian_window();
    let x = &pred.data;
    let y = &gt.data;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &win);
    let my = filter_valid(y, w, h, &win);
    let sxx = filter_valid(&xx, w, h, &win);
    let syy = filter_valid(&yy, w, h, &win);
    let sxy = filter_valid(&xy, w, h, &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / n as f64)
}

/// Hasler–Süsstrunk colorfulness on 0–255 channel values.
pub fn colorfulness(img: &Image<RgbPixel>) -> f64 {
    let n = img.data.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mut s = [0.0; 4]; // Σrg, Σyb, Σrg², Σyb²
    for p in &img.data {
        let (r, g, b) = (255.0 * p.r, 255.0 * p.g, 255.0 * p.b);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s[0] += rg;
        s[1] += yb;
        s[2] += rg * rg;
        s[3] += yb * yb;
    }
    let (mu_rg, mu_yb) = (s[0] / n, s[1] / n);
    let var_rg = (s[2] / n - mu_rg * mu_rg).max(0.0);
    let var_yb = (s[3] / n - mu_yb * mu_yb).max(0.0);
    libm::sqrt(var_rg + var_yb) + 0.3 * libm::sqrt(mu_rg * mu_rg + mu_yb * mu_yb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub colorful_pred: f64,
    pub colorful_gt: f64,
    pub delta_colorful: f64,
}

impl MetricReport {
    pub fn compute(pred: &Image<RgbPixel>, gt: &Image<RgbPixel>) -> Result<Self, MetricsError> {
        let psnr = psnr(pred, gt)?;
        let ssim = ssim(&luminance_plane(pred), &luminance_plane(gt))?;
        let colorful_pred = colorfulness(pred);
        let colorful_gt = colorfulness(gt);
        Ok(Self { psnr, ssim, colorful_pred, colorful_gt, delta_colorful: (colorful_pred - colorful_gt).abs() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub views: Vec<MetricReport>,
    pub mean: MetricReport,
}

/// Per-view metrics and their arithmetic means.
pub fn evaluate(pred: &[Image<RgbPixel>], gt: &[Image<RgbPixel>]) -> Result<Evaluation, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Unpaired { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let views = pred.iter().zip(gt).map(|(p, g)| MetricReport::compute(p, g)).collect::<Result<Vec<_>, _>>()?;
    let n = views.len() as f64;
    let mean_of = |f: fn(&MetricReport) -> f64| views.iter().map(f).sum::<f64>() / n;
    let mean = MetricReport {
        psnr: mean_of(|r| r.psnr),
        ssim: mean_of(|r| r.ssim),
        colorful_pred: mean_of(|r| r.colorful_pred),
        colorful_gt: mean_of(|r| r.colorful_gt),
        delta_colorful: mean_of(|r| r.delta_colorful),
    };
    Ok(Evaluation { views, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: usize, h: usize, p: RgbPixel) -> Image<RgbPixel> {
        Image::filled(w, h, p)
    }

    #[test]
    fn psnr_cases() {
        let a = constant(4, 4, RgbPixel::new(0.5, 0.5, 0.5));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = constant(4, 4, RgbPixel::new(0.6, 0.6, 0.6));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = constant(4, 4, RgbPixel::new(0.51, 0.51, 0.51));
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &constant(3, 4, RgbPixel::BLACK)), Err(MetricsError::SizeMismatch(..))));
    }

    #[test]
    fn ssim_constant_images() {
        let half = Image::filled(16, 16, 0.5);
        assert!((ssim(&half, &half).unwrap() - 1.0).abs() < 1e-12);
        let zero = Image::filled(16, 16, 0.0);
        let one = Image::filled(16, 16, 1.0);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&one, &zero).unwrap() - expected).abs() < 1e-12);
        assert_eq!(ssim(&Image::filled(10, 16, 0.0), &Image::filled(10, 16, 0.0)), Err(MetricsError::TooSmall([10, 16])));
    }

    #[test]
    fn colorfulness_hand_cases() {
        assert_eq!(colorfulness(&constant(5, 5, RgbPixel::new(0.3, 0.3, 0.3))), 0.0);
        let red = colorfulness(&constant(5, 5, RgbPixel::new(1.0, 0.0, 0.0)));
        assert!((red - 0.3 * libm::sqrt(255.0 * 255.0 + 127.5 * 127.5)).abs() < 1e-9);
        assert!((red - 85.5296).abs() < 1e-4);
        let mut mixed = constant(2, 1, RgbPixel::new(1.0, 0.0, 0.0));
        mixed.data[1] = RgbPixel::new(0.0, 1.0, 0.0);
        assert!((colorfulness(&mixed) - 293.25).abs() < 1e-9);
    }

    #[test]
    fn evaluate_identity_and_pairing() {
        let a = constant(12, 12, RgbPixel::new(0.2, 0.4, 0.6));
        let e = evaluate(&[a.clone()], &[a.clone()]).unwrap();
        assert_eq!(e.views.len(), 1);
        assert_eq!(e.mean, e.views[0]);
        assert_eq!(e.mean.psnr, f64::INFINITY);
        assert!((e.mean.ssim - 1.0).abs() < 1e-12);
        assert_eq!(e.mean.delta_colorful, 0.0);
        assert_eq!(evaluate(&[a.clone()], &[]), Err(MetricsError::Unpaired { pred: 1, gt: 0 }));
    }
}
