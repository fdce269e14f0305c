//! Dataset directories: `cameras.json`, `view_%03d.png` and float32 sidecars
//! `view_%03d.L.f32` (Lab L in [0, 100]) and `view_%03d.ab.f32` (interleaved
//! a, b), all row-major little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use chromafield_core::color::RgbPixel;
use chromafield_core::math::Mat3;
use chromafield_core::scene::View;
use chromafield_core::{Aabb, Camera, Image, MultiViewDataset, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{io_err, FormatError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}: missing cameras.json")]
    MissingCameras(PathBuf),
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("view {index} is {got:?} but the dataset is {expected:?}")]
    SizeMismatch { index: usize, expected: [usize; 2], got: [usize; 2] },
    #[error("{path}: {source}")]
    Png { path: PathBuf, source: image::ImageError },
}

fn invalid(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::Invalid { path: path.to_path_buf(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera `[R | c]`, 3×4 row-major.
    pub poses: Vec<[[f64; 4]; 3]>,
    /// Scene bounds as `[min, max]`.
    pub bbox: [[f64; 3]; 2],
}

impl CameraFile {
    pub fn from_cameras(cams: &[Camera], bbox: &Aabb) -> Self {
        let first = &cams[0];
        let poses = cams
            .iter()
            .map(|c| {
                let r = c.rotation.0;
                let t = c.translation.to_array();
                [0, 1, 2].map(|i| [r[i][0], r[i][1], r[i][2], t[i]])
            })
            .collect();
        Self {
            focal: first.focal,
            width: first.width,
            height: first.height,
            poses,
            bbox: [bbox.min.to_array(), bbox.max.to_array()],
        }
    }

    pub fn cameras(&self, path: &Path) -> Result<Vec<Camera>, DatasetError> {
        self.poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let r = Mat3([0, 1, 2].map(|row| [p[row][0], p[row][1], p[row][2]]));
                let t = Vec3::new(p[0][3], p[1][3], p[2][3]);
                Camera::new(self.focal, self.width, self.height, r, t).map_err(|e| invalid(path, format!("pose {i}: {e}")))
            })
            .collect()
    }

    pub fn aabb(&self, path: &Path) -> Result<Aabb, DatasetError> {
        Aabb::new(Vec3::from_array(self.bbox[0]), Vec3::from_array(self.bbox[1])).map_err(|e| invalid(path, e.to_string()))
    }
}

pub fn view_stem(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("view_{index:03}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<(), FormatError> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != 4 * expected {
        return Err(invalid(path, format!("expected {expected} float32 values, found {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Image<RgbPixel>, path: &Path) -> Result<(), DatasetError> {
    let raw: Vec<u8> = img.data.iter().flat_map(|p| [to_u8(p.r), to_u8(p.g), to_u8(p.b)]).collect();
    image::save_buffer(path, &raw, img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })
}

pub fn load_png(path: &Path) -> Result<Image<RgbPixel>, DatasetError> {
    let img = image::open(path).map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| RgbPixel::new(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect();
    Ok(Image::from_vec(w as usize, h as usize, data))
}

pub fn save_dataset(dataset: &MultiViewDataset, dir: &Path) -> Result<(), DatasetError> {
    let Some(first) = dataset.views.first() else {
        return Err(invalid(dir, "dataset has no views"));
    };
    let expected = first.size();
    for (index, v) in dataset.views.iter().enumerate() {
        for got in [v.size(), [v.lum.width, v.lum.height], [v.ab.width, v.ab.height], [v.camera.width, v.camera.height]] {
            if got != expected {
                return Err(DatasetError::SizeMismatch { index, expected, got });
            }
        }
        if v.camera.focal != first.camera.focal {
            return Err(invalid(dir, format!("view {index} has a different focal length")));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, v) in dataset.views.iter().enumerate() {
        let stem = view_stem(dir, i);
        save_png(&v.rgb, &with_suffix(&stem, ".png"))?;
        write_f32(&with_suffix(&stem, ".L.f32"), v.lum.data.iter().copied())?;
        write_f32(&with_suffix(&stem, ".ab.f32"), v.ab.data.iter().flat_map(|ab| *ab))?;
    }
    let cams = CameraFile::from_cameras(&dataset.cameras(), &dataset.bbox);
    let path = dir.join("cameras.json");
    fs::write(&path, serde_json::to_string_pretty(&cams).expect("cameras serialize") + "\n").map_err(io_err(&path))?;
    Ok(())
}

/// Loads a dataset. Float sidecars, when present, replace the L and ab planes
/// derived from the 8-bit PNG.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset, DatasetError> {
    let path = dir.join("cameras.json");
    if !path.is_file() {
        return Err(DatasetError::MissingCameras(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let cams: CameraFile = serde_json::from_str(&text).map_err(|e| invalid(&path, e.to_string()))?;
    let bbox = cams.aabb(&path)?;
    let expected = [cams.width, cams.height];
    let mut views = Vec::new();
    for (index, camera) in cams.cameras(&path)?.into_iter().enumerate() {
        let stem = view_stem(dir, index);
        let rgb = load_png(&with_suffix(&stem, ".png"))?;
        if [rgb.width, rgb.height] != expected {
            return Err(DatasetError::SizeMismatch { index, expected, got: [rgb.width, rgb.height] });
        }
        let mut view = View::from_rgb(camera, rgb);
        let n = cams.width * cams.height;
        let l_path = with_suffix(&stem, ".L.f32");
        if l_path.is_file() {
            view.lum = Image::from_vec(cams.width, cams.height, read_f32(&l_path, n)?);
        }
        let ab_path = with_suffix(&stem, ".ab.f32");
        if ab_path.is_file() {
            let flat = read_f32(&ab_path, 2 * n)?;
            view.ab = Image::from_vec(cams.width, cams.height, flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect());
        }
        views.push(view);
    }
    MultiViewDataset::new(bbox, views).map_err(|e| invalid(dir, e.to_string()))
}
