//! Dense trilinear voxel grids for raw density, raw luminance and Q color logits.
//!
//! Grid node `(i, j, k)` sits at `bbox.min + (i, j, k) ⊙ extent / (N − 1)` and
//! all grids are stored x-fastest: `index = i + Nx·(j + Ny·k)`. Logits are
//! voxel-major, each node holding `Q` contiguous values.
//!
//! Activations: `σ = softplus(raw)`, `lum = sigmoid(raw)`, logits are raw.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::color::AbBinTable;
use crate::math::{logit, sigmoid, softplus, softplus_inverse, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("bounding box must have positive extent on every axis")]
    EmptyBox,
    #[error("grid resolution must be at least 2 on every axis, got {0:?}")]
    Resolution([usize; 3]),
    #[error("color table must have at least one bin")]
    EmptyTable,
    #[error("grid data has {got} values, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite value in a grid")]
    NonFinite,
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, FieldError> {
        let ok = (0..3).all(|a| max.component(a) - min.component(a) > 0.0);
        if ok {
            Ok(Self { min, max })
        } else {
            Err(FieldError::EmptyBox)
        }
    }

    /// Cube `[-half, half]³`.
    pub fn cube(half: f64) -> Self {
        Self { min: Vec3::new(-half, -half, -half), max: Vec3::new(half, half, half) }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p.component(a) >= self.min.component(a) && p.component(a) <= self.max.component(a))
    }

    /// Slab intersection of `origin + t·dir`, clipped to `t ≥ 0`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0: f64 = 0.0;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = origin.component(a);
            let d = dir.component(a);
            let (lo, hi) = (self.min.component(a), self.max.component(a));
            if d.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
            if ta > tb {
                core::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Initial activated values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldInit {
    pub density: f64,
    pub luminance: f64,
}

impl Default for FieldInit {
    fn default() -> Self {
        Self { density: 0.1, luminance: 0.5 }
    }
}

/// The eight grid nodes around a point with their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub bbox: Aabb,
    pub resolution: [usize; 3],
    pub density: Vec<f64>,
    pub luminance: Vec<f64>,
    pub logits: Vec<f64>,
    table: Arc<AbBinTable>,
}

/// Activated outputs at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub lum: f64,
    pub logits: Vec<f64>,
}

/// Loss gradient with respect to one [`FieldSample`].
#[derive(Debug, Clone, Copy)]
pub struct SampleGrad<'a> {
    pub sigma: f64,
    pub lum: f64,
    pub logits: Option<&'a [f64]>,
}

impl FieldParams {
    pub fn new(bbox: Aabb, resolution: [usize; 3], table: Arc<AbBinTable>, init: FieldInit) -> Result<Self, FieldError> {
        Aabb::new(bbox.min, bbox.max)?;
        if resolution.iter().any(|&n| n < 2) {
            return Err(FieldError::Resolution(resolution));
        }
        if table.is_empty() {
            return Err(FieldError::EmptyTable);
        }
        let n = resolution.iter().product::<usize>();
        let q = table.len();
        Ok(Self {
            bbox,
            resolution,
            density: vec![softplus_inverse(init.density); n],
            luminance: vec![logit(init.luminance); n],
            logits: vec![0.0; n * q],
            table,
        })
    }

    /// Assembles parameters from stored grids (e.g. a checkpoint).
    pub fn from_grids(
        bbox: Aabb,
        resolution: [usize; 3],
        table: Arc<AbBinTable>,
        density: Vec<f64>,
        luminance: Vec<f64>,
        logits: Vec<f64>,
    ) -> Result<Self, FieldError> {
        let mut field = Self::new(bbox, resolution, table, FieldInit::default())?;
        let n = field.voxel_count();
        let q = field.q();
        for (got, expected) in [(density.len(), n), (luminance.len(), n), (logits.len(), n * q)] {
            if got != expected {
                return Err(FieldError::DataLength { expected, got });
            }
        }
        if density.iter().chain(&luminance).chain(&logits).any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite);
        }
        field.density = density;
        field.luminance = luminance;
        field.logits = logits;
        Ok(field)
    }

    pub fn table(&self) -> &AbBinTable {
        &self.table
    }

    pub fn shared_table(&self) -> Arc<AbBinTable> {
        self.table.clone()
    }

    pub fn q(&self) -> usize {
        self.table.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let e = self.bbox.extent();
        let step = |n: usize, len: f64, idx: usize| len * idx as f64 / (n - 1) as f64;
        self.bbox.min
            + Vec3::new(
                step(self.resolution[0], e.x, i),
                step(self.resolution[1], e.y, j),
                step(self.resolution[2], e.z, k),
            )
    }

    /// Trilinear stencil at `x`; `None` outside the box.
    pub fn corners(&self, x: Vec3) -> Option<Corners> {
        if !self.bbox.contains(x) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let lo = self.bbox.min.component(a);
            let len = self.bbox.max.component(a) - lo;
            let g = (x.component(a) - lo) / len * (n - 1) as f64;
            let i = (libm::floor(g) as usize).min(n - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            index[c] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let w = |d: usize, f: f64| if d == 1 { f } else { 1.0 - f };
            weight[c] = w(dx, frac[0]) * w(dy, frac[1]) * w(dz, frac[2]);
        }
        Some(Corners { index, weight })
    }

    /// Raw (pre-activation) density and luminance at the stencil.
    pub fn raw_scalars(&self, c: &Corners) -> (f64, f64) {
        let mut d = 0.0;
        let mut l = 0.0;
        for (&i, &w) in c.index.iter().zip(&c.weight) {
            d += w * self.density[i];
            l += w * self.luminance[i];
        }
        (d, l)
    }

    /// Activated density and luminance; zero outside the box.
    pub fn query_scalars(&self, x: Vec3) -> (f64, f64) {
        match self.corners(x) {
            Some(c) => {
                let (d, l) = self.raw_scalars(&c);
                (softplus(d), sigmoid(l))
            }
            None => (0.0, 0.0),
        }
    }

    /// Raw logits at the stencil, written into `out` (length Q).
    pub fn logits_at(&self, c: &Corners, out: &mut [f64]) {
        let q = self.q();
        out.fill(0.0);
        for (&i, &w) in c.index.iter().zip(&c.weight) {
            if w == 0.0 {
                continue;
            }
            for (o, &z) in out.iter_mut().zip(&self.logits[i * q..(i + 1) * q]) {
                *o += w * z;
            }
        }
    }

    pub fn query(&self, x: Vec3) -> FieldSample {
        let mut logits = vec![0.0; self.q()];
        match self.corners(x) {
            Some(c) => {
                let (d, l) = self.raw_scalars(&c);
                self.logits_at(&c, &mut logits);
                FieldSample { sigma: softplus(d), lum: sigmoid(l), logits }
            }
            None => FieldSample { sigma: 0.0, lum: 0.0, logits },
        }
    }

    /// Accumulates `∂loss/∂raw` for every grid value touched by `query(x)`.
    pub fn query_backward(&self, x: Vec3, upstream: &SampleGrad<'_>, grads: &mut GradBuffer) {
        let Some(c) = self.corners(x) else { return };
        let (d, l) = self.raw_scalars(&c);
        // softplus' = sigmoid; sigmoid' = s (1 - s)
        let d_raw_density = upstream.sigma * sigmoid(d);
        let s = sigmoid(l);
        let d_raw_lum = upstream.lum * s * (1.0 - s);
        let q = self.q();
        for (&i, &w) in c.index.iter().zip(&c.weight) {
            grads.touch(i);
            grads.density[i] += w * d_raw_density;
            grads.luminance[i] += w * d_raw_lum;
            if let Some(g) = upstream.logits {
                for (acc, &gq) in grads.logits[i * q..(i + 1) * q].iter_mut().zip(g) {
                    *acc += w * gq;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().chain(&self.luminance).chain(&self.logits).all(|v| v.is_finite())
    }
}

/// Convenience wrapper mirroring [`FieldParams::new`].
pub fn init_field(bbox: Aabb, resolution: [usize; 3], table: Arc<AbBinTable>, init: FieldInit) -> Result<FieldParams, FieldError> {
    FieldParams::new(bbox, resolution, table, init)
}

/// Accumulated gradients, shaped like a [`FieldParams`]. Tracks which nodes
/// were touched so clearing and sparse optimizer updates skip the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub density: Vec<f64>,
    pub luminance: Vec<f64>,
    pub logits: Vec<f64>,
    q: usize,
    touched: Vec<bool>,
    touched_list: Vec<usize>,
}

impl GradBuffer {
    pub fn for_field(field: &FieldParams) -> Self {
        let n = field.voxel_count();
        let q = field.q();
        Self {
            density: vec![0.0; n],
            luminance: vec![0.0; n],
            logits: vec![0.0; n * q],
            q,
            touched: vec![false; n],
            touched_list: Vec::new(),
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn touch(&mut self, node: usize) {
        if !self.touched[node] {
            self.touched[node] = true;
            self.touched_list.push(node);
        }
    }

    /// Nodes with possibly nonzero gradient, in first-touch order.
    pub fn touched(&self) -> &[usize] {
        &self.touched_list
    }

    pub fn zero(&mut self) {
        let q = self.q;
        for &i in &self.touched_list {
            self.touched[i] = false;
            self.density[i] = 0.0;
            self.luminance[i] = 0.0;
            self.logits[i * q..(i + 1) * q].fill(0.0);
        }
        self.touched_list.clear();
    }

    /// Adds `coeff · g` to the logits of `node`.
    pub fn add_logits(&mut self, node: usize, coeff: f64, g: &[f64]) {
        self.touch(node);
        let q = self.q;
        for (acc, &gq) in self.logits[node * q..(node + 1) * q].iter_mut().zip(g) {
            *acc += coeff * gq;
        }
    }
}
