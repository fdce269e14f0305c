//! sRGB (D65) ⇄ CIE Lab conversion, ab-plane quantization, soft labels and
//! argmax decoding.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorError {
    #[error("Lab ({l}, {a}, {b}) is outside the sRGB gamut")]
    OutOfGamut { l: f64, a: f64, b: f64 },
    #[error("no ab candidate is in gamut for the given lightness sweep")]
    EmptyTable,
    #[error("invalid bin table parameters: {0}")]
    InvalidTable(&'static str),
    #[error("color distribution has no positive entry")]
    ZeroDistribution,
    #[error("distribution has {got} entries, table has {expected}")]
    DistributionSize { expected: usize, got: usize },
}

/// sRGB pixel with channels in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RgbPixel {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl RgbPixel {
    pub const BLACK: RgbPixel = RgbPixel::new(0.0, 0.0, 0.0);

    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self::new(c(self.r), c(self.g), c(self.b))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }
}

/// CIE Lab with L in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabPixel {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

// IEC 61966-2-1 linear sRGB -> XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = invert3(RGB_TO_XYZ);

// D65 white as the image of linear (1, 1, 1), so white lands exactly on the gray axis.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0; // (6/29)^3
const KAPPA: f64 = 24389.0 / 27.0;

// Tolerance on the [0, 1] bounds when deciding whether a Lab value is representable.
const GAMUT_SLACK: f64 = 1e-9;

const fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv = 1.0 / det;
    [
        [c00 * inv, (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv, (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv],
        [c01 * inv, (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv, (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv],
        [c02 * inv, (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv, (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv],
    ]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        libm::pow((c + 0.055) / 1.055, 2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * libm::pow(c, 1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        libm::cbrt(t)
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let cube = f * f * f;
    if cube > EPSILON {
        cube
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn rgb_to_lab(rgb: RgbPixel) -> LabPixel {
    let lin = [srgb_to_linear(rgb.r), srgb_to_linear(rgb.g), srgb_to_linear(rgb.b)];
    let xyz = mat_mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    LabPixel::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Lab → sRGB. With `clamp` unset, values outside the sRGB cube are an error.
pub fn lab_to_rgb(lab: LabPixel, clamp: bool) -> Result<RgbPixel, ColorError> {
    let lin = lab_to_linear_rgb(lab);
    let in_gamut = lin.iter().all(|&c| (-GAMUT_SLACK..=1.0 + GAMUT_SLACK).contains(&c));
    if !in_gamut && !clamp {
        return Err(ColorError::OutOfGamut { l: lab.l, a: lab.a, b: lab.b });
    }
    let enc = |c: f64| linear_to_srgb(c.clamp(0.0, 1.0));
    Ok(RgbPixel::new(enc(lin[0]), enc(lin[1]), enc(lin[2])))
}

fn lab_to_linear_rgb(lab: LabPixel) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE[0], lab_f_inv(fy) * WHITE[1], lab_f_inv(fz) * WHITE[2]];
    mat_mul(&XYZ_TO_RGB, xyz)
}

/// Whether `(l, a, b)` maps inside the sRGB cube.
pub fn in_gamut(lab: LabPixel) -> bool {
    lab_to_rgb(lab, false).is_ok()
}

/// The quantized ab palette: in-gamut grid centers in lexicographic (a, b)
/// order, plus a dense lattice index for nearest-neighbor queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AbBinTable {
    centers: Vec<[f64; 2]>,
    grid_step: f64,
    // Lattice nodes per axis and the coordinate of node 0.
    side: usize,
    origin: f64,
    lattice: Vec<Option<u32>>,
}

impl AbBinTable {
    /// Builds a table from explicit centers, e.g. a pinned table read from disk.
    /// Every center must sit on the `grid_step` lattice and the list must be
    /// strictly increasing in (a, b).
    pub fn from_centers(grid_step: f64, centers: Vec<[f64; 2]>) -> Result<Self, ColorError> {
        if !(grid_step > 0.0) || !grid_step.is_finite() {
            return Err(ColorError::InvalidTable("grid step must be positive"));
        }
        if centers.is_empty() {
            return Err(ColorError::EmptyTable);
        }
        for pair in centers.windows(2) {
            if !lex_less(pair[0], pair[1]) {
                return Err(ColorError::InvalidTable("centers must be strictly increasing in (a, b)"));
            }
        }
        let mut extent: f64 = 0.0;
        for c in &centers {
            for &v in c {
                let k = v / grid_step;
                if (k - libm::round(k)).abs() > 1e-9 {
                    return Err(ColorError::InvalidTable("center off the grid lattice"));
                }
                extent = extent.max(libm::round(k).abs());
            }
        }
        let half_nodes = extent as usize;
        let side = 2 * half_nodes + 1;
        let origin = -(half_nodes as f64) * grid_step;
        let mut lattice = vec![None; side * side];
        for (q, c) in centers.iter().enumerate() {
            let i = libm::round((c[0] - origin) / grid_step) as usize;
            let j = libm::round((c[1] - origin) / grid_step) as usize;
            lattice[i * side + j] = Some(q as u32);
        }
        Ok(Self { centers, grid_step, side, origin, lattice })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn center(&self, q: usize) -> [f64; 2] {
        self.centers[q]
    }

    /// Nearest bin, ties to the lower index.
    pub fn nearest(&self, ab: [f64; 2]) -> usize {
        self.k_nearest(ab, 1)[0].0
    }

    /// The `k` closest bins as `(index, squared distance)`, ordered by
    /// distance then index.
    pub fn k_nearest(&self, ab: [f64; 2], k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.len());
        let side = self.side as i64;
        let node = |v: f64| libm::round((v - self.origin) / self.grid_step).clamp(0.0, (side - 1) as f64) as i64;
        let (ci, cj) = (node(ab[0]), node(ab[1]));
        let mut found: Vec<(usize, f64)> = Vec::new();
        let visit = |i: i64, j: i64, found: &mut Vec<(usize, f64)>| {
            if i < 0 || j < 0 || i >= side || j >= side {
                return;
            }
            if let Some(q) = self.lattice[(i * side + j) as usize] {
                let c = self.centers[q as usize];
                let d2 = (c[0] - ab[0]) * (c[0] - ab[0]) + (c[1] - ab[1]) * (c[1] - ab[1]);
                found.push((q as usize, d2));
            }
        };
        let order = |x: &(usize, f64), y: &(usize, f64)| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0));
        for r in 0..side {
            if r == 0 {
                visit(ci, cj, &mut found);
            } else {
                for d in -r..=r {
                    visit(ci - r, cj + d, &mut found);
                    visit(ci + r, cj + d, &mut found);
                }
                for d in (-r + 1)..r {
                    visit(ci + d, cj - r, &mut found);
                    visit(ci + d, cj + r, &mut found);
                }
            }
            if found.len() >= k {
                found.sort_by(order);
                // Unvisited nodes are at least (r + 1/2) steps away.
                let bound = (r as f64 + 0.5) * self.grid_step;
                if found[k - 1].1 < bound * bound {
                    break;
                }
            }
        }
        found.sort_by(order);
        found.truncate(k);
        found
    }
}

fn lex_less(x: [f64; 2], y: [f64; 2]) -> bool {
    x[0] < y[0] || (x[0] == y[0] && x[1] < y[1])
}

/// Quantizes the ab square `[-half_range, half_range]²` at `grid_step` and keeps
/// the centers representable in sRGB for at least one lightness in `l_sweep`.
pub fn build_ab_bin_table(grid_step: f64, half_range: f64, l_sweep: &[f64]) -> Result<AbBinTable, ColorError> {
    if !(grid_step > 0.0) {
        return Err(ColorError::InvalidTable("grid step must be positive"));
    }
    let nodes = half_range / grid_step;
    if half_range < 0.0 || (nodes - libm::round(nodes)).abs() > 1e-9 {
        return Err(ColorError::InvalidTable("half range must be a multiple of the grid step"));
    }
    let n = libm::round(nodes) as i64;
    let mut centers = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let (a, b) = (i as f64 * grid_step, j as f64 * grid_step);
            if l_sweep.iter().any(|&l| in_gamut(LabPixel::new(l, a, b))) {
                centers.push([a, b]);
            }
        }
    }
    if centers.is_empty() {
        return Err(ColorError::EmptyTable);
    }
    AbBinTable::from_centers(grid_step, centers)
}

/// `L ∈ {1, …, 99}`.
pub fn default_l_sweep() -> Vec<f64> {
    (1..=99).map(|l| l as f64).collect()
}

/// The standard palette: step 10 over `[-110, 110]²`, gamut-swept over `L ∈ {1, …, 99}`.
pub fn default_table() -> AbBinTable {
    build_ab_bin_table(10.0, 110.0, &default_l_sweep()).expect("the default sweep has in-gamut colors")
}

/// Sparse target distribution over table bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    /// `(bin, weight)` by ascending distance to the encoded color.
    pub entries: Vec<(usize, f64)>,
}

impl SoftLabel {
    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// The bin with the largest weight (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = self.entries[0];
        for &e in &self.entries[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        best.0
    }

    pub fn to_dense(&self, q: usize) -> Vec<f64> {
        let mut out = vec![0.0; q];
        for &(i, w) in &self.entries {
            out[i] = w;
        }
        out
    }
}

/// Encodes `ab` over its `k` nearest bins with Gaussian distance weights.
pub fn soft_label(ab: [f64; 2], table: &AbBinTable, k: usize, sigma: f64) -> SoftLabel {
    debug_assert!(k >= 1 && sigma > 0.0);
    let near = table.k_nearest(ab, k);
    let d0 = near[0].1;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut entries: Vec<(usize, f64)> = near.iter().map(|&(q, d2)| (q, libm::exp(-(d2 - d0) * inv))).collect();
    let total: f64 = entries.iter().map(|e| e.1).sum();
    for e in &mut entries {
        e.1 /= total;
    }
    SoftLabel { entries }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(dist: &[f64]) -> Result<usize, ColorError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in dist.iter().enumerate() {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    match best {
        Some((i, p)) if p > 0.0 => Ok(i),
        _ => Err(ColorError::ZeroDistribution),
    }
}

/// The ab center of the most probable bin.
pub fn decode_argmax(dist: &[f64], table: &AbBinTable) -> Result<[f64; 2], ColorError> {
    if dist.len() != table.len() {
        return Err(ColorError::DistributionSize { expected: table.len(), got: dist.len() });
    }
    Ok(table.center(argmax(dist)?))
}
