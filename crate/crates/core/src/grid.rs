//! Dense real-valued pixel grids and the correlation routines shared by the
//! front-end stages.
//!
//! All filtering in the crate is correlation (`out[i] = Σ k[j]·x[i + j]`),
//! with reflective (`reflect-101`) padding at the borders.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width` grid of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Three-plane (R, G, B) image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    planes: [Grid; 3],
}

impl RgbImage {
    pub fn new(r: Grid, g: Grid, b: Grid) -> Result<Self> {
        if !r.same_shape(&g) || !r.same_shape(&b) {
            return Err(Error::Shape("RGB planes differ in size".into()));
        }
        Ok(RgbImage { planes: [r, g, b] })
    }

    /// Achromatic image with the same luminance in every plane.
    pub fn gray(luminance: Grid) -> Self {
        RgbImage {
            planes: [luminance.clone(), luminance.clone(), luminance],
        }
    }

    pub fn plane(&self, channel: usize) -> &Grid {
        &self.planes[channel]
    }

    pub fn planes(&self) -> &[Grid; 3] {
        &self.planes
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn is_achromatic(&self) -> bool {
        self.planes[0] == self.planes[1] && self.planes[1] == self.planes[2]
    }

    /// Per-pixel mean of the three planes.
    pub fn luminance(&self) -> Grid {
        let [r, g, b] = &self.planes;
        let data = r
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .zip(b.as_slice())
            .map(|((r, g), b)| (r + g + b) / 3.0)
            .collect();
        Grid {
            width: r.width(),
            height: r.height(),
            data,
        }
    }
}

/// Reflect-101 index mapping (`-1 → 1`, `n → n-2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Half-open rectangle of output pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Region {
    pub fn full(grid: &Grid) -> Self {
        Region {
            row0: 0,
            row1: grid.height(),
            col0: 0,
            col1: grid.width(),
        }
    }

    /// Square of half-width `half` around `(row, col)`, clipped to the grid.
    pub fn around(row: usize, col: usize, half: usize, height: usize, width: usize) -> Self {
        Region {
            row0: row.saturating_sub(half),
            row1: (row + half + 1).min(height),
            col0: col.saturating_sub(half),
            col1: (col + half + 1).min(width),
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// Separable correlation restricted to `region`; the result has the
/// region's shape. `row_kernel` runs along columns (x), `col_kernel` along
/// rows (y); both must have odd length.
pub fn correlate_separable_region(
    grid: &Grid,
    row_kernel: &[f64],
    col_kernel: &[f64],
    region: Region,
) -> Grid {
    let hx = row_kernel.len() / 2;
    let hy = col_kernel.len() / 2;
    let (h, w) = (grid.height(), grid.width());
    let out_w = region.width();
    let out_h = region.height();
    let src_rows = out_h + 2 * hy;

    // Horizontal pass over every source row the vertical pass will touch.
    let mut tmp = vec![0.0; src_rows * out_w];
    let mut padded = vec![0.0; out_w + 2 * hx];
    for sr in 0..src_rows {
        let r = reflect_index(region.row0 as isize + sr as isize - hy as isize, h);
        let row = grid.row(r);
        for (k, p) in padded.iter_mut().enumerate() {
            *p = row[reflect_index(region.col0 as isize + k as isize - hx as isize, w)];
        }
        let dst = &mut tmp[sr * out_w..(sr + 1) * out_w];
        for (c, d) in dst.iter_mut().enumerate() {
            let window = &padded[c..c + row_kernel.len()];
            *d = window.iter().zip(row_kernel).map(|(a, b)| a * b).sum();
        }
    }

    let mut out = Grid::zeros(out_h, out_w);
    let data = out.as_mut_slice();
    for (j, &kv) in col_kernel.iter().enumerate() {
        for r in 0..out_h {
            let src = &tmp[(r + j) * out_w..(r + j + 1) * out_w];
            let dst = &mut data[r * out_w..(r + 1) * out_w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

pub fn correlate_separable(grid: &Grid, row_kernel: &[f64], col_kernel: &[f64]) -> Grid {
    correlate_separable_region(grid, row_kernel, col_kernel, Region::full(grid))
}

/// Value of the correlation of `grid` with the odd-sided `kernel` at one pixel.
pub fn correlate_at(grid: &Grid, kernel: &Grid, row: usize, col: usize) -> f64 {
    let hy = kernel.height() / 2;
    let hx = kernel.width() / 2;
    let (h, w) = (grid.height(), grid.width());
    let interior = row >= hy && col >= hx && row + hy < h && col + hx < w;
    let mut acc = 0.0;
    for kr in 0..kernel.height() {
        let krow = kernel.row(kr);
        if interior {
            let src = &grid.row(row + kr - hy)[col - hx..col + hx + 1];
            acc += src.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
        } else {
            let r = reflect_index(row as isize + kr as isize - hy as isize, h);
            let src = grid.row(r);
            for (kc, kv) in krow.iter().enumerate() {
                let c = reflect_index(col as isize + kc as isize - hx as isize, w);
                acc += kv * src[c];
            }
        }
    }
    acc
}

/// Gathers the reflect-padded `(2·half+1)²` patch centred on `(row, col)`.
pub fn patch(grid: &Grid, row: usize, col: usize, half: usize) -> Grid {
    let side = 2 * half + 1;
    Grid::from_fn(side, side, |r, c| {
        let rr = reflect_index(row as isize + r as isize - half as isize, grid.height());
        let cc = reflect_index(col as isize + c as isize - half as isize, grid.width());
        grid.get(rr, cc)
    })
}

fn fft2_in_place(
    buf: &mut [Complex<f64>],
    rows: usize,
    cols: usize,
    row_fft: &Arc<dyn Fft<f64>>,
    col_fft: &Arc<dyn Fft<f64>>,
) {
    row_fft.process(buf);
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = buf[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            buf[r * cols + c] = column[r];
        }
    }
}

/// FFT-backed correlation of one image with many kernels.
///
/// The input is reflect-padded once by `max_half` and its spectrum cached;
/// every kernel whose half-size is at most `max_half` can then be applied at
/// the cost of one forward and one inverse transform.
pub struct FftCorrelator {
    height: usize,
    width: usize,
    pad: usize,
    rows: usize,
    cols: usize,
    spectrum: Vec<Complex<f64>>,
    forward: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
    inverse: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
}

impl FftCorrelator {
    pub fn new(grid: &Grid, max_half: usize) -> Self {
        let (h, w) = (grid.height(), grid.width());
        let rows = h + 2 * max_half;
        let cols = w + 2 * max_half;
        let mut planner = FftPlanner::new();
        let forward = (
            planner.plan_fft_forward(cols),
            planner.plan_fft_forward(rows),
        );
        let inverse = (
            planner.plan_fft_inverse(cols),
            planner.plan_fft_inverse(rows),
        );
        let mut spectrum = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let rr = reflect_index(r as isize - max_half as isize, h);
            for c in 0..cols {
                let cc = reflect_index(c as isize - max_half as isize, w);
                spectrum.push(Complex::new(grid.get(rr, cc), 0.0));
            }
        }
        fft2_in_place(&mut spectrum, rows, cols, &forward.0, &forward.1);
        FftCorrelator {
            height: h,
            width: w,
            pad: max_half,
            rows,
            cols,
            spectrum,
            forward,
            inverse,
        }
    }

    pub fn correlate(&self, kernel: &Grid) -> Result<Grid> {
        let hy = kernel.height() / 2;
        let hx = kernel.width() / 2;
        if hy > self.pad || hx > self.pad {
            return Err(Error::Shape(format!(
                "kernel {}x{} exceeds the padding of {} px",
                kernel.height(),
                kernel.width(),
                self.pad
            )));
        }
        let (rows, cols) = (self.rows, self.cols);
        let mut kbuf = vec![Complex::new(0.0, 0.0); rows * cols];
        for kr in 0..kernel.height() {
            let r = (kr as isize - hy as isize).rem_euclid(rows as isize) as usize;
            for kc in 0..kernel.width() {
                let c = (kc as isize - hx as isize).rem_euclid(cols as isize) as usize;
                kbuf[r * cols + c] = Complex::new(kernel.get(kr, kc), 0.0);
            }
        }
        fft2_in_place(&mut kbuf, rows, cols, &self.forward.0, &self.forward.1);
        for (k, s) in kbuf.iter_mut().zip(&self.spectrum) {
            *k = s * k.conj();
        }
        fft2_in_place(&mut kbuf, rows, cols, &self.inverse.0, &self.inverse.1);
        let norm = 1.0 / (rows * cols) as f64;
        Ok(Grid::from_fn(self.height, self.width, |r, c| {
            kbuf[(r + self.pad) * cols + c + self.pad].re * norm
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(grid: &Grid, kernel: &Grid) -> Grid {
        Grid::from_fn(grid.height(), grid.width(), |r, c| {
            correlate_at(grid, kernel, r, c)
        })
    }

    fn test_grid(h: usize, w: usize) -> Grid {
        Grid::from_fn(h, w, |r, c| ((r * 31 + c * 17) % 13) as f64 * 0.1 - 0.4)
    }

    #[test]
    fn reflect_101() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-9, 5), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn separable_matches_direct() {
        let g = test_grid(17, 23);
        let kx = [0.2, -0.5, 1.0, 0.3, 0.1];
        let ky = [0.7, 0.1, -0.3];
        let k2 = Grid::from_fn(3, 5, |r, c| ky[r] * kx[c]);
        let a = correlate_separable(&g, &kx, &ky);
        let b = brute(&g, &k2);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let region = Region::around(4, 20, 3, 17, 23);
        let part = correlate_separable_region(&g, &kx, &ky, region);
        for r in 0..region.height() {
            for c in 0..region.width() {
                let full = b.get(region.row0 + r, region.col0 + c);
                assert!((part.get(r, c) - full).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fft_matches_direct() {
        let g = test_grid(20, 14);
        let k = Grid::from_fn(7, 5, |r, c| (r as f64 - 2.0) * 0.3 + c as f64 * 0.11);
        let fft = FftCorrelator::new(&g, 4);
        let a = fft.correlate(&k).unwrap();
        let b = brute(&g, &k);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        let too_big = Grid::zeros(11, 11);
        assert!(fft.correlate(&too_big).is_err());
    }

    #[test]
    fn patch_reflects_at_border() {
        let g = test_grid(6, 6);
        let p = patch(&g, 0, 0, 1);
        assert_eq!(p.get(0, 0), g.get(1, 1));
        assert_eq!(p.get(1, 1), g.get(0, 0));
    }
}
