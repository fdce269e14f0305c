use alloc::vec;
use alloc::vec::Vec;

/// Row-major image buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer length");
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }
}

/// Values that can be blended for sub-pixel lookups.
pub trait Lerp: Copy {
    fn weighted(self, w: f64) -> Self;
    fn plus(self, o: Self) -> Self;
}

impl Lerp for f32 {
    fn weighted(self, w: f64) -> Self {
        (self as f64 * w) as f32
    }
    fn plus(self, o: Self) -> Self {
        self + o
    }
}

impl Lerp for f64 {
    fn weighted(self, w: f64) -> Self {
        self * w
    }
    fn plus(self, o: Self) -> Self {
        self + o
    }
}

impl<const N: usize> Lerp for [f64; N] {
    fn weighted(self, w: f64) -> Self {
        self.map(|v| v * w)
    }
    fn plus(self, o: Self) -> Self {
        let mut out = self;
        for (a, b) in out.iter_mut().zip(o) {
            *a += b;
        }
        out
    }
}

impl<T: Lerp> Image<T> {
    /// Bilinear lookup with pixel centers at integer coordinates; clamps at
    /// the border.
    pub fn bilinear(&self, x: f64, y: f64) -> T {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = libm::floor(x) as usize;
        let y0 = libm::floor(y) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0).weighted(1.0 - fx).plus(self.get(x1, y0).weighted(fx));
        let bottom = self.get(x0, y1).weighted(1.0 - fx).plus(self.get(x1, y1).weighted(fx));
        top.weighted(1.0 - fy).plus(bottom.weighted(fy))
    }
}
