//! Radiance fields that learn luminance and density from monochrome views and
//! then learn a per-point distribution over quantized ab colors.
//!
//! The crate is `no_std` (with `alloc`). Everything that touches the file
//! system, subprocesses or a command line lives in the `chromafield` crate.
//!
//! Pipeline in brief:
//!
//! 1. [`train::train_luminance`] fits density and luminance grids to the L
//!    channel of posed views with a photometric loss.
//! 2. [`train::train_color`] freezes those grids, renders luminance patches,
//!    sends them to a [`colorize::Colorizer`], discards patches whose ab
//!    histogram disagrees with a set of wide reference patches, and fits a
//!    Q-way color distribution per point with a KL loss against soft labels.
//! 3. [`render::render_image`] decodes the most likely ab bin per pixel and
//!    combines it with the rendered L channel.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod color;
pub mod colorize;
pub mod field;
pub mod image;
pub mod math;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod seed;
pub mod train;

pub use color::{AbBinTable, LabPixel, RgbPixel, SoftLabel};
pub use colorize::{AbPatch, BaseSet, Colorizer, Histogram2D};
pub use field::{Aabb, FieldParams, FieldSample, GradBuffer};
pub use image::Image;
pub use math::Vec3;
pub use render::{Camera, PatchSpec, Ray};
pub use scene::{MultiViewDataset, SyntheticScene};
pub use train::TrainConfig;
