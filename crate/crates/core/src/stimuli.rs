//! Drifting gratings and pseudo-natural images on a square visual grid.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};

/// Square pixel grid spanning `fov_deg` of visual angle. Pixel `resolution/2`
/// sits at 0 deg in both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualGrid {
    pub fov_deg: f64,
    pub resolution_px: usize,
}

impl Default for VisualGrid {
    fn default() -> Self {
        VisualGrid {
            fov_deg: 7.0,
            resolution_px: 224,
        }
    }
}

impl VisualGrid {
    pub fn new(fov_deg: f64, resolution_px: usize) -> Result<Self> {
        let grid = VisualGrid {
            fov_deg,
            resolution_px,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg.is_finite() && self.fov_deg > 0.0) {
            return Err(Error::invalid("fov_deg", "must be finite and > 0"));
        }
        if self.resolution_px < 3 {
            return Err(Error::invalid("resolution_px", "must be at least 3"));
        }
        Ok(())
    }

    #[inline]
    pub fn px_per_deg(&self) -> f64 {
        self.resolution_px as f64 / self.fov_deg
    }

    /// Index of the pixel at 0 deg.
    #[inline]
    pub fn center_index(&self) -> usize {
        self.resolution_px / 2
    }

    /// Position of pixel index `i` in degrees.
    #[inline]
    pub fn coord_deg(&self, i: usize) -> f64 {
        (i as f64 - self.center_index() as f64) / self.px_per_deg()
    }

    pub fn deg_to_px(&self, deg: f64) -> f64 {
        deg * self.px_per_deg()
    }
}

/// Parametric drifting sine-wave grating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GratingSpec {
    pub diameter_deg: f64,
    pub sf_cpd: f64,
    pub contrast: f64,
    #[serde(default)]
    pub orientation_rad: f64,
    #[serde(default = "default_phases")]
    pub n_phases: usize,
    #[serde(default = "default_phase_step")]
    pub phase_step_rad: f64,
    #[serde(default = "default_background")]
    pub background: f64,
}

fn default_phases() -> usize {
    12
}

fn default_phase_step() -> f64 {
    PI / 6.0
}

fn default_background() -> f64 {
    0.5
}

impl GratingSpec {
    /// Horizontal 12-phase grating with a gray background.
    pub fn new(diameter_deg: f64, sf_cpd: f64, contrast: f64) -> Self {
        GratingSpec {
            diameter_deg,
            sf_cpd,
            contrast,
            orientation_rad: 0.0,
            n_phases: default_phases(),
            phase_step_rad: default_phase_step(),
            background: default_background(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_deg.is_finite() && self.diameter_deg >= 0.0) {
            return Err(Error::invalid("diameter_deg", "must be finite and >= 0"));
        }
        if !(self.sf_cpd.is_finite() && self.sf_cpd > 0.0) {
            return Err(Error::invalid("sf_cpd", "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::invalid(
                "contrast",
                format!("{} is outside [0, 1]", self.contrast),
            ));
        }
        if !self.orientation_rad.is_finite() {
            return Err(Error::invalid("orientation_rad", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::invalid("background", "must lie in [0, 1]"));
        }
        if self.n_phases == 0 {
            return Err(Error::invalid("n_phases", "must be >= 1"));
        }
        let span = self.n_phases as f64 * self.phase_step_rad;
        if (span - 2.0 * PI).abs() > 1e-9 {
            return Err(Error::invalid(
                "phase_step_rad",
                format!("n_phases x phase_step = {span}, expected one full cycle"),
            ));
        }
        Ok(())
    }

    pub fn phase(&self, k: usize) -> f64 {
        k as f64 * self.phase_step_rad
    }
}

/// Rendered phase sequence of one grating.
#[derive(Debug, Clone)]
pub struct GratingFrames {
    pub frames: Vec<RgbImage>,
    /// Diameter actually used, after clamping to the field of view.
    pub diameter_deg: f64,
    pub diameter_clamped: bool,
}

/// Luminance planes of every phase of `spec`.
///
/// Inside the centred circular aperture a frame is
/// `0.5 + 0.5·contrast·sin(2π·sf·u + k·step)`, where `u` is the coordinate
/// along the grating normal; outside it is `background`.
pub fn render_grating_luminance(
    spec: &GratingSpec,
    grid: &VisualGrid,
) -> Result<(Vec<Grid>, f64, bool)> {
    spec.validate()?;
    grid.validate()?;
    let clamped = spec.diameter_deg > grid.fov_deg;
    let diameter = spec.diameter_deg.min(grid.fov_deg);
    let radius2 = (diameter / 2.0).powi(2);
    let n = grid.resolution_px;
    let coords: Vec<f64> = (0..n).map(|i| grid.coord_deg(i)).collect();

    // sin(a·x + b·y + φ) = sin(a·x)·cos(b·y + φ) + cos(a·x)·sin(b·y + φ)
    let w = 2.0 * PI * spec.sf_cpd;
    let a = -w * spec.orientation_rad.sin();
    let b = w * spec.orientation_rad.cos();
    let (sin_x, cos_x): (Vec<f64>, Vec<f64>) = coords.iter().map(|&x| (a * x).sin_cos()).unzip();
    let amp = 0.5 * spec.contrast;

    let mut frames = Vec::with_capacity(spec.n_phases);
    for k in 0..spec.n_phases {
        let phase = spec.phase(k);
        let mut plane = Grid::filled(n, n, spec.background);
        if amp == 0.0 {
            for (r, &y) in coords.iter().enumerate() {
                for (c, &x) in coords.iter().enumerate() {
                    if x * x + y * y < radius2 {
                        plane.set(r, c, 0.5);
                    }
                }
            }
            frames.push(plane);
            continue;
        }
        for (r, &y) in coords.iter().enumerate() {
            let (sy, cy) = (b * y + phase).sin_cos();
            for (c, &x) in coords.iter().enumerate() {
                if x * x + y * y < radius2 {
                    let s = sin_x[c] * cy + cos_x[c] * sy;
                    plane.set(r, c, 0.5 + amp * s);
                }
            }
        }
        frames.push(plane);
    }
    Ok((frames, diameter, clamped))
}

/// Renders the `n_phases` achromatic frames of a drifting grating.
pub fn render_grating(spec: &GratingSpec, grid: &VisualGrid) -> Result<GratingFrames> {
    let (planes, diameter_deg, diameter_clamped) = render_grating_luminance(spec, grid)?;
    Ok(GratingFrames {
        frames: planes.into_iter().map(RgbImage::gray).collect(),
        diameter_deg,
        diameter_clamped,
    })
}

/// Zero-mean, unit-variance field with a 1/f amplitude spectrum.
fn pink_field(rng: &mut ChaCha8Rng, n: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    fft2(&mut buf, n, &*fwd);
    for r in 0..n {
        let fy = freq_index(r, n);
        for c in 0..n {
            let fx = freq_index(c, n);
            let f = (fx * fx + fy * fy).sqrt();
            buf[r * n + c] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    fft2(&mut buf, n, &*inv);
    let field: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    field.into_iter().map(|v| (v - mean) / sd).collect()
}

fn freq_index(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

fn fft2(buf: &mut [Complex<f64>], n: usize, fft: &dyn rustfft::Fft<f64>) {
    fft.process(buf);
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
}

const NATURAL_CONTRAST: f64 = 0.15;
const CHROMA_WEIGHT: f64 = 0.3;

/// Deterministic batch of pseudo-natural colour images.
///
/// Each image shares a 1/f luminance field across channels plus a weaker
/// independent 1/f field per channel, mapped to mean 0.5 and clipped to
/// `[0, 1]`.
pub fn render_natural_batch(seed: u64, count: usize, grid: &VisualGrid) -> Result<Vec<RgbImage>> {
    if count == 0 {
        return Err(Error::invalid("count", "must be >= 1"));
    }
    grid.validate()?;
    let n = grid.resolution_px;
    let mut planner = FftPlanner::new();
    let mut batch = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let lum = pink_field(&mut rng, n, &mut planner);
        let mut planes = Vec::with_capacity(3);
        for _ in 0..3 {
            let chroma = pink_field(&mut rng, n, &mut planner);
            let data = lum
                .iter()
                .zip(&chroma)
                .map(|(l, c)| (0.5 + NATURAL_CONTRAST * (l + CHROMA_WEIGHT * c)).clamp(0.0, 1.0))
                .collect();
            planes.push(Grid::from_vec(n, n, data)?);
        }
        let b = planes.pop().unwrap();
        let g = planes.pop().unwrap();
        let r = planes.pop().unwrap();
        batch.push(RgbImage::new(r, g, b)?);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VisualGrid {
        VisualGrid::default()
    }

    #[test]
    fn grid_mapping() {
        let g = grid();
        assert_eq!(g.px_per_deg(), 32.0);
        assert_eq!(g.coord_deg(112), 0.0);
        assert_eq!(g.coord_deg(0), -3.5);
    }

    #[test]
    fn zero_contrast_is_uniform_gray() {
        let spec = GratingSpec::new(7.0, 2.0, 0.0);
        let frames = render_grating(&spec, &grid()).unwrap();
        assert_eq!(frames.frames.len(), 12);
        for f in &frames.frames {
            assert!(f.plane(0).as_slice().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn zero_diameter_is_background() {
        let mut spec = GratingSpec::new(0.0, 2.0, 1.0);
        spec.background = 0.3;
        let frames = render_grating(&spec, &grid()).unwrap();
        for f in &frames.frames {
            for p in f.planes() {
                assert!(p.as_slice().iter().all(|&v| v == 0.3));
            }
        }
    }

    #[test]
    fn one_cpd_has_seven_cycles_across_midline() {
        let spec = GratingSpec::new(7.0, 1.0, 1.0);
        let frames = render_grating(&spec, &grid()).unwrap();
        // Frames whose zeros fall between pixel centres.
        for k in [1usize, 2, 4, 5, 7, 8, 10, 11] {
            let plane = frames.frames[k].plane(0);
            // Row 0 lies on the aperture edge and shows the background.
            let column: Vec<f64> = (1..224).map(|r| plane.get(r, 112) - 0.5).collect();
            let crossings = column
                .windows(2)
                .filter(|w| (w[0] < 0.0) != (w[1] < 0.0))
                .count();
            assert_eq!(crossings, 14, "frame {k}");
        }
    }

    #[test]
    fn phase_average_is_uniform() {
        for orientation in [0.0, 0.4, 1.3] {
            let mut spec = GratingSpec::new(7.0, 3.3, 0.8);
            spec.orientation_rad = orientation;
            let frames = render_grating(&spec, &grid()).unwrap();
            let n = frames.frames.len() as f64;
            for i in 0..224 * 224 {
                let avg: f64 = frames
                    .frames
                    .iter()
                    .map(|f| f.plane(1).as_slice()[i])
                    .sum::<f64>()
                    / n;
                assert!((avg - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_contrast_and_clamps_diameter() {
        assert!(render_grating(&GratingSpec::new(2.0, 1.0, 1.5), &grid()).is_err());
        assert!(render_grating(&GratingSpec::new(2.0, 1.0, -0.1), &grid()).is_err());
        let out = render_grating(&GratingSpec::new(10.0, 1.0, 0.5), &grid()).unwrap();
        assert!(out.diameter_clamped);
        assert_eq!(out.diameter_deg, 7.0);
        let mut bad_phase = GratingSpec::new(2.0, 1.0, 0.5);
        bad_phase.n_phases = 8;
        assert!(render_grating(&bad_phase, &grid()).is_err());
    }

    #[test]
    fn pixels_within_unit_interval() {
        let mut spec = GratingSpec::new(5.0, 6.0, 1.0);
        spec.orientation_rad = 0.7;
        let frames = render_grating(&spec, &grid()).unwrap();
        for f in &frames.frames {
            assert!(f
                .plane(2)
                .as_slice()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn natural_batch_is_deterministic() {
        let g = VisualGrid::new(7.0, 64).unwrap();
        let a = render_natural_batch(1, 4, &g).unwrap();
        let b = render_natural_batch(1, 4, &g).unwrap();
        assert_eq!(a, b);
        let c = render_natural_batch(2, 4, &g).unwrap();
        assert_ne!(a, c);
        assert!(render_natural_batch(1, 0, &g).is_err());
    }

    #[test]
    fn natural_image_statistics() {
        let g = grid();
        let batch = render_natural_batch(7, 1, &g).unwrap();
        assert_eq!(batch.len(), 1);
        let img = &batch[0];
        let mean = (0..3).map(|c| img.plane(c).mean()).sum::<f64>() / 3.0;
        assert!((0.3..=0.7).contains(&mean), "{mean}");
        for p in img.planes() {
            assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
