//! Gabor filter bank stage (VOneBlock variant) with simple/complex cells,
//! per-filter spike scaling and cortical noise.
//!
//! The block runs in two modes. In cascade mode it reads the four channels
//! of a [`SubcorticalBlock`]; in bypass mode it reads the raw image,
//! normalized to `(x − ½)/½`, with channels `[R, G, B, mean(R, G, B)]`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{correlate_at, FftCorrelator, Grid, Region, RgbImage};
use crate::neurophys::Cell;
use crate::stimuli::{render_grating_luminance, render_natural_batch, GratingSpec, VisualGrid};
use crate::subcortical::{
    noise_rng, noise_with_fano, scale_to_spikes, NoiseSpec, OpponentChannel, SubcorticalBlock,
};

pub const SF_MIN_CPD: f64 = 0.5;
pub const SF_MAX_CPD: f64 = 8.0;

/// Envelope width in carrier periods: `σ = ENVELOPE_PERIODS / sf`.
pub const ENVELOPE_PERIODS: f64 = 0.4;

/// Kernel half-width in envelope standard deviations.
const KERNEL_SIGMAS: f64 = 3.0;

/// Filter bank size used by the harness unless configured otherwise.
pub const HARNESS_CHANNELS: usize = 32;

/// Noise streams `0..4` belong to the subcortical channels.
const CORTICAL_STREAM_BASE: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Simple,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VOneMode {
    /// Raw image straight into the filter bank.
    Bypass,
    /// Subcortical block output into the filter bank.
    Cascade,
}

impl std::str::FromStr for VOneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bypass" => Ok(VOneMode::Bypass),
            "cascade" => Ok(VOneMode::Cascade),
            _ => Err(Error::invalid("mode", format!("unknown mode {s:?}"))),
        }
    }
}

/// One filter of the bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaborParams {
    /// Orientation of the preferred grating, same convention as [`GratingSpec`].
    pub orientation_rad: f64,
    pub sf_cpd: f64,
    /// Envelope width along the carrier.
    pub sigma_x_deg: f64,
    /// Envelope width along the bars.
    pub sigma_y_deg: f64,
    pub phase_rad: f64,
    pub input_channel: usize,
    pub cell_type: CellType,
}

impl GaborParams {
    /// Orientation-0, phase-0 filter with the default envelope.
    pub fn probe(sf_cpd: f64, input_channel: usize, cell_type: CellType) -> Self {
        GaborParams {
            orientation_rad: 0.0,
            sf_cpd,
            sigma_x_deg: ENVELOPE_PERIODS / sf_cpd,
            sigma_y_deg: ENVELOPE_PERIODS / sf_cpd,
            phase_rad: 0.0,
            input_channel,
            cell_type,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(SF_MIN_CPD..=SF_MAX_CPD).contains(&self.sf_cpd) {
            return Err(Error::invalid(
                "sf_cpd",
                format!("{} outside [{SF_MIN_CPD}, {SF_MAX_CPD}]", self.sf_cpd),
            ));
        }
        for (name, v) in [
            ("sigma_x_deg", self.sigma_x_deg),
            ("sigma_y_deg", self.sigma_y_deg),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} must be finite and > 0")));
            }
        }
        if !self.orientation_rad.is_finite() || !self.phase_rad.is_finite() {
            return Err(Error::NonFinite("gabor angles"));
        }
        if self.input_channel > 3 {
            return Err(Error::invalid(
                "input_channel",
                format!("{} not in 0..=3", self.input_channel),
            ));
        }
        Ok(())
    }

    /// Grating that drives this filter's centre unit hardest, as a full-field
    /// drifting stimulus.
    pub fn preferred_grating(&self, grid: &VisualGrid, contrast: f64) -> GratingSpec {
        let mut spec = GratingSpec::new(2.0 * grid.fov_deg, self.sf_cpd, contrast);
        spec.orientation_rad = self.orientation_rad;
        spec
    }
}

/// Parameters of a sampled filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfbSpec {
    pub n_channels: usize,
    pub simple_fraction: f64,
    pub seed: u64,
    pub grid: VisualGrid,
}

impl Default for GfbSpec {
    fn default() -> Self {
        GfbSpec {
            n_channels: 512,
            simple_fraction: 0.5,
            seed: 0,
            grid: VisualGrid::default(),
        }
    }
}

impl GfbSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_channels == 0 || self.n_channels % 2 != 0 {
            return Err(Error::invalid("n_channels", "must be even and > 0"));
        }
        if self.simple_fraction != 0.5 {
            return Err(Error::invalid("simple_fraction", "is fixed at 0.5"));
        }
        Ok(())
    }
}

/// Seeded filter bank: SF log-uniform in `[0.5, 8]` cpd, orientation uniform
/// in `[0, π)`, phase uniform, input channel uniform over the four channels.
/// The first half are simple cells, the second half complex.
pub fn sample_gfb(spec: &GfbSpec) -> Result<Vec<GaborParams>> {
    spec.validate()?;
    let mut rng = noise_rng(spec.seed, 0);
    let (lo, hi) = (SF_MIN_CPD.ln(), SF_MAX_CPD.ln());
    let n_simple = spec.n_channels / 2;
    Ok((0..spec.n_channels)
        .map(|i| {
            let sf = rng
                .random_range(lo..=hi)
                .exp()
                .clamp(SF_MIN_CPD, SF_MAX_CPD);
            let orientation = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let input_channel = rng.random_range(0..4usize);
            GaborParams {
                orientation_rad: orientation,
                sf_cpd: sf,
                sigma_x_deg: ENVELOPE_PERIODS / sf,
                sigma_y_deg: ENVELOPE_PERIODS / sf,
                phase_rad: phase,
                input_channel,
                cell_type: if i < n_simple {
                    CellType::Simple
                } else {
                    CellType::Complex
                },
            }
        })
        .collect())
}

/// Sampled kernels of one filter. `odd` is the 90°-shifted quadrature
/// partner, present for complex cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborKernel {
    pub even: Grid,
    pub odd: Option<Grid>,
}

impl GaborKernel {
    pub fn half(&self) -> usize {
        self.even.height() / 2
    }
}

fn gabor_grid(p: &GaborParams, grid: &VisualGrid, half: usize, phase: f64) -> Grid {
    let ppd = grid.px_per_deg();
    let (sin_t, cos_t) = p.orientation_rad.sin_cos();
    let side = 2 * half + 1;
    let w = 2.0 * PI * p.sf_cpd;
    let mut env_sum = 0.0;
    let mut g = Grid::from_fn(side, side, |r, c| {
        let y = (r as f64 - half as f64) / ppd;
        let x = (c as f64 - half as f64) / ppd;
        let u = -x * sin_t + y * cos_t;
        let v = x * cos_t + y * sin_t;
        let env = (-(u * u) / (2.0 * p.sigma_x_deg.powi(2))
            - (v * v) / (2.0 * p.sigma_y_deg.powi(2)))
        .exp();
        env_sum += env;
        env * (w * u + phase).cos()
    });
    for v in g.as_mut_slice() {
        *v /= env_sum;
    }
    g
}

/// Samples the filter on the pixel grid out to three envelope widths,
/// normalized by the envelope sum.
pub fn make_gabor_kernel(p: &GaborParams, grid: &VisualGrid) -> Result<GaborKernel> {
    p.validate()?;
    grid.validate()?;
    let sigma_px = grid.deg_to_px(p.sigma_x_deg.max(p.sigma_y_deg));
    let max_half = (grid.resolution_px - 1) / 2;
    let half = ((KERNEL_SIGMAS * sigma_px).ceil() as usize).clamp(1, max_half);
    let even = gabor_grid(p, grid, half, p.phase_rad);
    let odd = match p.cell_type {
        CellType::Simple => None,
        CellType::Complex => Some(gabor_grid(p, grid, half, p.phase_rad - PI / 2.0)),
    };
    Ok(GaborKernel { even, odd })
}

fn nonlinearity(cell_type: CellType, even: f64, odd: f64) -> f64 {
    match cell_type {
        CellType::Simple => even.max(0.0),
        CellType::Complex => even.hypot(odd),
    }
}

fn check_input4(input4: &[Grid]) -> Result<()> {
    if input4.len() != 4 {
        return Err(Error::Shape(format!(
            "filter bank needs 4 input channels, got {}",
            input4.len()
        )));
    }
    if input4.iter().any(|g| !g.same_shape(&input4[0])) {
        return Err(Error::Shape("input channels differ in shape".into()));
    }
    Ok(())
}

fn gfb_forward_kernels(
    input4: &[Grid],
    filters: &[GaborParams],
    kernels: &[GaborKernel],
) -> Result<Vec<Grid>> {
    check_input4(input4)?;
    let mut out: Vec<Option<Grid>> = vec![None; filters.len()];
    for (channel, plane) in input4.iter().enumerate() {
        let users: Vec<usize> = (0..filters.len())
            .filter(|&i| filters[i].input_channel == channel)
            .collect();
        if users.is_empty() {
            continue;
        }
        if plane.as_slice().iter().all(|&v| v == 0.0) {
            for &i in &users {
                out[i] = Some(Grid::zeros(plane.height(), plane.width()));
            }
            continue;
        }
        let max_half = users
            .iter()
            .map(|&i| kernels[i].half())
            .max()
            .expect("nonempty");
        let corr = FftCorrelator::new(plane, max_half);
        for &i in &users {
            let even = corr.correlate(&kernels[i].even)?;
            let y = match &kernels[i].odd {
                None => even.map(|e| nonlinearity(CellType::Simple, e, 0.0)),
                Some(k) => {
                    let odd = corr.correlate(k)?;
                    let data = even
                        .as_slice()
                        .iter()
                        .zip(odd.as_slice())
                        .map(|(&e, &o)| nonlinearity(CellType::Complex, e, o))
                        .collect();
                    Grid::from_vec(even.height(), even.width(), data)?
                }
            };
            out[i] = Some(y);
        }
    }
    Ok(out
        .into_iter()
        .map(|g| g.expect("every filter has a channel"))
        .collect())
}

/// Unscaled filter-bank responses: rectified linear output for simple cells,
/// quadrature energy for complex cells.
pub fn gfb_forward(
    input4: &[Grid],
    filters: &[GaborParams],
    grid: &VisualGrid,
) -> Result<Vec<Grid>> {
    let kernels = filters
        .iter()
        .map(|p| make_gabor_kernel(p, grid))
        .collect::<Result<Vec<_>>>()?;
    gfb_forward_kernels(input4, filters, &kernels)
}

/// Bypass-mode input channels `[R, G, B, mean(R, G, B)]`, each as `(x − ½)/½`.
pub fn bypass_input(image: &RgbImage) -> Vec<Grid> {
    let norm = |g: &Grid| g.map(|v| (v - 0.5) / 0.5);
    let mut out: Vec<Grid> = image.planes().iter().map(norm).collect();
    out.push(norm(&image.luminance()));
    out
}

/// Adds cortical noise of per-filter Fano factor to scaled responses.
/// Streams are disjoint from the subcortical ones for the same seed.
pub fn vone_forward(
    input4: &[Grid],
    filters: &[GaborParams],
    grid: &VisualGrid,
    scales: &[f64],
    cortical_fano: &[f64],
    seed: Option<u64>,
) -> Result<Vec<Grid>> {
    if scales.len() != filters.len() || cortical_fano.len() != filters.len() {
        return Err(Error::Shape(
            "one scale and one Fano factor per filter required".into(),
        ));
    }
    let clean = gfb_forward(input4, filters, grid)?;
    Ok(add_cortical_noise(clean, scales, cortical_fano, seed))
}

fn add_cortical_noise(
    clean: Vec<Grid>,
    scales: &[f64],
    fano: &[f64],
    seed: Option<u64>,
) -> Vec<Grid> {
    clean
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let scaled = if scales[i] == 1.0 {
                g
            } else {
                g.map(|v| v * scales[i])
            };
            match seed {
                None => scaled,
                Some(s) => noise_with_fano(
                    &scaled,
                    fano[i],
                    &mut noise_rng(s, CORTICAL_STREAM_BASE + i as u64),
                ),
            }
        })
        .collect()
}

/// Moments of one filter's centre-unit response to a fixed stimulus under
/// subcortical noise, before cortical noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Per-trial samples of one unit under both noise sources.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTrials {
    /// Noisy, scaled subcortical activation at the unit's own pixel of its
    /// input channel (the noise-free input in bypass mode).
    pub input: Vec<f64>,
    /// Final noisy response of the unit.
    pub output: Vec<f64>,
}

/// The filter bank with its scales, cortical noise and input stage.
#[derive(Debug, Clone)]
pub struct VOneBlock {
    grid: VisualGrid,
    mode: VOneMode,
    filters: Vec<GaborParams>,
    kernels: Vec<GaborKernel>,
    subcortical: SubcorticalBlock,
    subcortical_noise: NoiseSpec,
    scales: Vec<f64>,
    cortical_fano: Vec<f64>,
}

impl VOneBlock {
    /// Unscaled block. `subcortical` is only read in cascade mode; its own
    /// scales are used as set.
    pub fn new(
        filters: Vec<GaborParams>,
        mode: VOneMode,
        subcortical: SubcorticalBlock,
    ) -> Result<Self> {
        let grid = *subcortical.grid();
        let kernels = filters
            .iter()
            .map(|p| make_gabor_kernel(p, &grid))
            .collect::<Result<Vec<_>>>()?;
        let n = filters.len();
        Ok(VOneBlock {
            grid,
            mode,
            filters,
            kernels,
            subcortical,
            subcortical_noise: NoiseSpec::subcortical(),
            scales: vec![1.0; n],
            cortical_fano: vec![1.0; n],
        })
    }

    pub fn grid(&self) -> &VisualGrid {
        &self.grid
    }

    pub fn mode(&self) -> VOneMode {
        self.mode
    }

    pub fn filters(&self) -> &[GaborParams] {
        &self.filters
    }

    pub fn kernel(&self, filter: usize) -> &GaborKernel {
        &self.kernels[filter]
    }

    pub fn subcortical(&self) -> &SubcorticalBlock {
        &self.subcortical
    }

    pub fn subcortical_noise(&self) -> &NoiseSpec {
        &self.subcortical_noise
    }

    pub fn set_subcortical_noise(&mut self, noise: NoiseSpec) -> Result<()> {
        noise.validate()?;
        self.subcortical_noise = noise;
        Ok(())
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn set_scales(&mut self, scales: Vec<f64>) -> Result<()> {
        if scales.len() != self.filters.len() {
            return Err(Error::Shape("one scale per filter required".into()));
        }
        self.scales = scales;
        Ok(())
    }

    pub fn cortical_fano(&self) -> &[f64] {
        &self.cortical_fano
    }

    pub fn set_cortical_fano(&mut self, fano: Vec<f64>) -> Result<()> {
        if fano.len() != self.filters.len() || fano.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid(
                "cortical_fano",
                "one finite value >= 0 per filter required",
            ));
        }
        self.cortical_fano = fano;
        Ok(())
    }

    /// Four-channel filter-bank input; `seed` enables subcortical noise in
    /// cascade mode.
    pub fn input(&self, image: &RgbImage, seed: Option<u64>) -> Result<Vec<Grid>> {
        match self.mode {
            VOneMode::Bypass => Ok(bypass_input(image)),
            VOneMode::Cascade => self
                .subcortical
                .forward(image, seed.map(|s| (&self.subcortical_noise, s))),
        }
    }

    /// Noise-free scaled responses, one grid per filter.
    pub fn forward_clean(&self, image: &RgbImage) -> Result<Vec<Grid>> {
        self.forward(image, None)
    }

    /// Full forward pass; `seed` enables both noise sources.
    pub fn forward(&self, image: &RgbImage, seed: Option<u64>) -> Result<Vec<Grid>> {
        let input = self.input(image, seed)?;
        let clean = gfb_forward_kernels(&input, &self.filters, &self.kernels)?;
        Ok(add_cortical_noise(
            clean,
            &self.scales,
            &self.cortical_fano,
            seed,
        ))
    }

    /// Calibrates the subcortical scales (cascade mode) and then the
    /// per-filter scales so that each stage's mean absolute response over
    /// `batch` equals the spike target.
    pub fn calibrate_scales(&mut self, batch: &[RgbImage]) -> Result<()> {
        if self.mode == VOneMode::Cascade {
            self.subcortical
                .calibrate(batch, self.subcortical_noise.spikes_mean_target)?;
        }
        self.scales = vec![1.0; self.filters.len()];
        let mut per_filter: Vec<Vec<Grid>> = vec![Vec::new(); self.filters.len()];
        for image in batch {
            for (i, g) in self.forward_clean(image)?.into_iter().enumerate() {
                per_filter[i].push(g);
            }
        }
        let target = NoiseSpec::cortical().spikes_mean_target;
        self.scales = per_filter
            .iter()
            .map(|grids| scale_to_spikes(grids, target))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Four input channels over the neighbourhood a unit at `(row, col)` of
    /// `filter` reads, embedded in full-size grids (zero elsewhere).
    fn local_input(
        &self,
        image: &RgbImage,
        filter: usize,
        row: usize,
        col: usize,
    ) -> Result<(Grid, Region)> {
        let n = self.grid.resolution_px;
        if image.height() != n || image.width() != n {
            return Err(Error::Shape(format!(
                "image is {}x{}, grid is {n}x{n}",
                image.height(),
                image.width()
            )));
        }
        if row >= n || col >= n {
            return Err(Error::Shape(format!(
                "unit ({row}, {col}) outside the grid"
            )));
        }
        let channel = self.filters[filter].input_channel;
        let region = Region::around(row, col, self.kernels[filter].half(), n, n);
        let mut plane = Grid::zeros(n, n);
        match self.mode {
            VOneMode::Bypass => {
                let src = if channel == 3 {
                    image.luminance()
                } else {
                    image.plane(channel).clone()
                };
                for r in region.row0..region.row1 {
                    for c in region.col0..region.col1 {
                        plane.set(r, c, (src.get(r, c) - 0.5) / 0.5);
                    }
                }
            }
            VOneMode::Cascade => {
                let oc = OpponentChannel::ALL[channel];
                let pathway = self.subcortical.pathway(oc.cell_class());
                let local = pathway.forward_region(image, oc, region)?;
                let scale = self.subcortical.scales()[channel];
                for r in 0..local.height() {
                    for c in 0..local.width() {
                        plane.set(region.row0 + r, region.col0 + c, scale * local.get(r, c));
                    }
                }
            }
        }
        Ok((plane, region))
    }

    /// Noise-free scaled response of one unit; matches the corresponding
    /// pixel of [`VOneBlock::forward_clean`].
    pub fn response_at(
        &self,
        image: &RgbImage,
        filter: usize,
        row: usize,
        col: usize,
    ) -> Result<f64> {
        self.check_filter(filter)?;
        let (plane, _) = self.local_input(image, filter, row, col)?;
        let k = &self.kernels[filter];
        let even = correlate_at(&plane, &k.even, row, col);
        let odd = k
            .odd
            .as_ref()
            .map_or(0.0, |o| correlate_at(&plane, o, row, col));
        Ok(self.scales[filter] * nonlinearity(self.filters[filter].cell_type, even, odd))
    }

    fn check_filter(&self, filter: usize) -> Result<()> {
        if filter >= self.filters.len() {
            return Err(Error::invalid(
                "filter",
                format!("{filter} >= bank size {}", self.filters.len()),
            ));
        }
        Ok(())
    }

    /// Harness cell reading the centre unit of `filter`.
    pub fn cell(&self, filter: usize) -> VOneUnit<'_> {
        let c = self.grid.center_index();
        VOneUnit {
            block: self,
            filter,
            row: c,
            col: c,
        }
    }

    /// Exact mean and variance of the scaled centre-unit response of
    /// `filter` to `image` when only subcortical noise is present, estimated
    /// by sampling the Gaussian the linear filter stage maps that noise onto.
    pub fn readout_moments(
        &self,
        image: &RgbImage,
        filter: usize,
        trials: usize,
        seed: u64,
    ) -> Result<ReadoutMoments> {
        self.check_filter(filter)?;
        let c = self.grid.center_index();
        let k = &self.kernels[filter];
        let half = k.half();
        let (plane, _) = self.local_input(image, filter, c, c)?;
        let (mut m_e, mut m_o) = (0.0, 0.0);
        let (mut v_e, mut v_o, mut cov) = (0.0, 0.0, 0.0);
        let fano = if self.mode == VOneMode::Cascade {
            self.subcortical_noise.fano
        } else {
            0.0
        };
        for r in 0..k.even.height() {
            for col in 0..k.even.width() {
                let s = plane.get(c + r - half, c + col - half);
                let ke = k.even.get(r, col);
                let ko = k.odd.as_ref().map_or(0.0, |o| o.get(r, col));
                let var = fano * s.abs();
                m_e += ke * s;
                m_o += ko * s;
                v_e += ke * ke * var;
                v_o += ko * ko * var;
                cov += ke * ko * var;
            }
        }
        // Cholesky factor of the 2x2 covariance of (even, odd).
        let l11 = v_e.sqrt();
        let l21 = if l11 > 0.0 { cov / l11 } else { 0.0 };
        let l22 = (v_o - l21 * l21).max(0.0).sqrt();
        let cell_type = self.filters[filter].cell_type;
        let scale = self.scales[filter];
        let mut rng = noise_rng(seed, CORTICAL_STREAM_BASE - 1);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..trials {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let e = m_e + l11 * z1;
            let o = m_o + l21 * z1 + l22 * z2;
            let y = scale * nonlinearity(cell_type, e, o);
            sum += y;
            sum_sq += y * y;
        }
        let n = trials as f64;
        let mean = sum / n;
        Ok(ReadoutMoments {
            mean,
            variance: (sum_sq - n * mean * mean) / (n - 1.0),
        })
    }

    /// Monte Carlo trials of one unit: every trial draws fresh subcortical
    /// noise for each input pixel the unit reads, applies the filter and
    /// nonlinearity, and adds cortical noise.
    pub fn sample_unit(
        &self,
        image: &RgbImage,
        filter: usize,
        row: usize,
        col: usize,
        trials: usize,
        seed: u64,
    ) -> Result<UnitTrials> {
        self.check_filter(filter)?;
        let (plane, region) = self.local_input(image, filter, row, col)?;
        let k = &self.kernels[filter];
        let sub_fano = if self.mode == VOneMode::Cascade {
            self.subcortical_noise.fano
        } else {
            0.0
        };
        let fano = self.cortical_fano[filter];
        let scale = self.scales[filter];
        let cell_type = self.filters[filter].cell_type;
        let mut rng = noise_rng(seed, CORTICAL_STREAM_BASE - 2);
        let mut out = UnitTrials {
            input: Vec::with_capacity(trials),
            output: Vec::with_capacity(trials),
        };
        let mut noisy = plane.clone();
        for _ in 0..trials {
            for r in region.row0..region.row1 {
                for c in region.col0..region.col1 {
                    let a = plane.get(r, c);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    noisy.set(r, c, a + (sub_fano * a.abs()).sqrt() * z);
                }
            }
            let e = correlate_at(&noisy, &k.even, row, col);
            let o = k
                .odd
                .as_ref()
                .map_or(0.0, |odd| correlate_at(&noisy, odd, row, col));
            let y = scale * nonlinearity(cell_type, e, o);
            let z: f64 = StandardNormal.sample(&mut rng);
            out.input.push(noisy.get(row, col));
            out.output.push(y + (fano * y.abs()).sqrt() * z);
        }
        Ok(out)
    }

    /// Sets each filter's cortical Fano factor to the complement that makes
    /// its end-to-end Fano factor one at its preferred full-contrast grating
    /// frame. Returns the calibrated factors.
    pub fn calibrate_fano(&mut self, trials: usize, seed: u64) -> Result<Vec<f64>> {
        if trials < 2 {
            return Err(Error::invalid("trials", "need at least 2"));
        }
        let mut fano = Vec::with_capacity(self.filters.len());
        for i in 0..self.filters.len() {
            let image = self.preferred_frame(i)?;
            let m = self.readout_moments(&image, i, trials, seed)?;
            let f = if m.mean > 0.0 {
                (1.0 - m.variance / m.mean).max(0.0)
            } else {
                1.0
            };
            fano.push(f);
        }
        self.cortical_fano = fano.clone();
        Ok(fano)
    }

    /// Full-field, full-contrast grating frame at the filter's orientation
    /// and SF that maximizes its noise-free centre response.
    pub fn preferred_frame(&self, filter: usize) -> Result<RgbImage> {
        self.check_filter(filter)?;
        let spec = self.filters[filter].preferred_grating(&self.grid, 1.0);
        let (frames, _, _) = render_grating_luminance(&spec, &self.grid)?;
        let c = self.grid.center_index();
        let mut best: Option<(f64, RgbImage)> = None;
        for f in frames {
            let img = RgbImage::gray(f);
            let r = self.response_at(&img, filter, c, c)?;
            if best.as_ref().map_or(true, |(b, _)| r > *b) {
                best = Some((r, img));
            }
        }
        Ok(best.expect("at least one frame").1)
    }
}

/// Builds a calibrated block: scales from a seeded natural-image batch, then
/// cortical Fano factors.
pub fn calibrated_block(
    filters: Vec<GaborParams>,
    mode: VOneMode,
    subcortical: SubcorticalBlock,
    seed: u64,
) -> Result<VOneBlock> {
    let mut block = VOneBlock::new(filters, mode, subcortical)?;
    let batch = render_natural_batch(seed, 4, block.grid())?;
    block.calibrate_scales(&batch)?;
    block.calibrate_fano(20_000, seed)?;
    Ok(block)
}

/// One filter-bank unit as a harness cell.
#[derive(Debug, Clone, Copy)]
pub struct VOneUnit<'a> {
    pub block: &'a VOneBlock,
    pub filter: usize,
    pub row: usize,
    pub col: usize,
}

impl Cell for VOneUnit<'_> {
    fn respond(&self, frame: &RgbImage) -> Result<f64> {
        self.block
            .response_at(frame, self.filter, self.row, self.col)
    }
}
