//! Parvocellular and magnocellular pathways of the subcortical block.
//!
//! Each output channel is computed as
//!
//! ```text
//! light adaptation → opponent DoG → contrast normalization → scale → noise
//! ```
//!
//! The ON/OFF push-pull stage is not materialized: contrast normalization is
//! odd in its input, so rectifying both polarities and subtracting returns
//! the signed signal unchanged (see [`push_pull_identity_check`]).

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{correlate_separable, correlate_separable_region, Grid, Region, RgbImage};
use crate::neurophys::Cell;
use crate::stimuli::VisualGrid;

/// Fraction of a Gaussian's integrated response a kernel window must hold.
pub const KERNEL_COVERAGE: f64 = 0.75;

/// Subtractive bias of light adaptation.
pub const LIGHT_ADAPTATION_BIAS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellClass {
    P,
    M,
}

impl std::fmt::Display for CellClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellClass::P => "P",
            CellClass::M => "M",
        })
    }
}

impl std::str::FromStr for CellClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(CellClass::P),
            "M" | "m" => Ok(CellClass::M),
            other => Err(Error::invalid(
                "cell_class",
                format!("unknown class `{other}`"),
            )),
        }
    }
}

/// How the signed peak-sensitivity ratio enters the DoG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRatioConvention {
    /// The surround is always subtracted with weight `|k_ratio|`.
    #[default]
    Magnitude,
    /// `k_ratio` is used as written; a negative value adds the surround.
    Literal,
}

/// Tunable scalars of one pathway. Radii are in degrees of visual angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathwayParams {
    pub gamma: f64,
    pub r_c: f64,
    pub r_s: f64,
    pub k_ratio: f64,
    pub r_cn: f64,
    pub c50: f64,
    pub n_cn: f64,
    pub cell_class: CellClass,
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} must be finite and > 0")))
    }
}

impl PathwayParams {
    pub fn validate(&self) -> Result<()> {
        positive("gamma", self.gamma)?;
        positive("r_c", self.r_c)?;
        positive("r_s", self.r_s)?;
        positive("r_cn", self.r_cn)?;
        positive("c50", self.c50)?;
        positive("n_cn", self.n_cn)?;
        if !self.k_ratio.is_finite() {
            return Err(Error::invalid("k_ratio", "must be finite"));
        }
        if self.r_s <= self.r_c {
            return Err(Error::invalid(
                "r_s",
                format!(
                    "surround radius {} must exceed center radius {}",
                    self.r_s, self.r_c
                ),
            ));
        }
        Ok(())
    }

    /// Weight with which the surround Gaussian is subtracted.
    pub fn surround_weight(&self, convention: KRatioConvention) -> f64 {
        match convention {
            KRatioConvention::Magnitude => self.k_ratio.abs(),
            KRatioConvention::Literal => self.k_ratio,
        }
    }

    /// Best point of `earlyvision tune --cell P --seed 0` (640 evaluations
    /// against the reference LGN targets).
    pub fn tuned_p() -> Self {
        PathwayParams {
            gamma: 0.9067801256245998,
            r_c: 0.049999999999999996,
            r_s: 0.32129908355399234,
            k_ratio: -0.0030000000000000027,
            r_cn: 0.41894947796030885,
            c50: 0.6094764173907922,
            n_cn: 0.9999881069487639,
            cell_class: CellClass::P,
        }
    }

    /// Best point of `earlyvision tune --cell M --seed 0`.
    pub fn tuned_m() -> Self {
        PathwayParams {
            gamma: 1.6535992818285192,
            r_c: 0.076,
            r_s: 0.482,
            k_ratio: -0.0060853901636422035,
            r_cn: 0.903,
            c50: 1.0,
            n_cn: 0.7081751795261462,
            cell_class: CellClass::M,
        }
    }
}

/// Kernel construction options shared by every pathway of a block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Integrated-response fraction used to size Gaussian windows.
    pub coverage: f64,
    pub k_convention: KRatioConvention,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            coverage: KERNEL_COVERAGE,
            k_convention: KRatioConvention::Magnitude,
        }
    }
}

/// Side length (odd, in pixels) of a window holding `coverage` of the
/// integrated response of `exp(-r²/radius²)`, capped at the grid size.
pub fn coverage_side(radius_px: f64, coverage: f64, resolution_px: usize) -> Result<usize> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::invalid("coverage", "must lie in (0, 1)"));
    }
    // 2-D mass within radius R is 1 - exp(-R²/r²).
    let reach = radius_px * (-(1.0 - coverage).ln()).sqrt();
    let mut side = (2.0 * reach).ceil() as usize;
    if side % 2 == 0 {
        side += 1;
    }
    let max_side = if resolution_px % 2 == 0 {
        resolution_px - 1
    } else {
        resolution_px
    };
    let side = side.min(max_side);
    if side < 3 {
        return Err(Error::KernelTooSmall { radius_px, side });
    }
    Ok(side)
}

fn gaussian_1d(radius_px: f64, half: usize) -> Vec<f64> {
    (0..2 * half + 1)
        .map(|i| {
            let x = i as f64 - half as f64;
            (-(x * x) / (radius_px * radius_px)).exp()
        })
        .collect()
}

fn rescale_to_sum(v: &mut [f64], target: f64) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x *= target / s;
    }
}

/// Separable difference-of-Gaussians kernel
/// `exp(-ρ²/r_c²) − k·exp(-ρ²/r_s²)`, with each lobe rescaled so that its
/// discrete sum equals the continuous integral `π·r²` (pixel units).
#[derive(Debug, Clone, PartialEq)]
pub struct DogKernel {
    half: usize,
    center_half: usize,
    center: Vec<f64>,
    surround: Vec<f64>,
    surround_weight: f64,
    raw_k_ratio: f64,
    r_c_px: f64,
    r_s_px: f64,
}

impl DogKernel {
    pub fn half(&self) -> usize {
        self.half
    }

    pub fn side(&self) -> usize {
        2 * self.half + 1
    }

    /// Subtractive surround weight actually used.
    pub fn surround_weight(&self) -> f64 {
        self.surround_weight
    }

    /// Signed ratio as supplied in the parameters.
    pub fn raw_k_ratio(&self) -> f64 {
        self.raw_k_ratio
    }

    /// Analytic DC gain `π(r_c² − k·r_s²)` in pixel units.
    pub fn continuous_dc_gain(&self) -> f64 {
        PI * (self.r_c_px.powi(2) - self.surround_weight * self.r_s_px.powi(2))
    }

    /// 1-D center profile, zero-padded to the full kernel width.
    pub fn center_profile(&self) -> Vec<f64> {
        let pad = self.half - self.center_half;
        let mut v = vec![0.0; pad];
        v.extend_from_slice(&self.center);
        v.extend(std::iter::repeat(0.0).take(pad));
        v
    }

    pub fn surround_profile(&self) -> &[f64] {
        &self.surround
    }

    pub fn to_grid(&self) -> Grid {
        let c = self.center_profile();
        let s = &self.surround;
        let k = self.surround_weight;
        let side = self.side();
        Grid::from_fn(side, side, |r, col| c[r] * c[col] - k * (s[r] * s[col]))
    }

    /// Correlates center and surround drives over `region`.
    fn apply_region(&self, center_drive: &Grid, surround_drive: &Grid, region: Region) -> Grid {
        let mut out = correlate_separable_region(center_drive, &self.center, &self.center, region);
        if self.surround_weight != 0.0 {
            let s =
                correlate_separable_region(surround_drive, &self.surround, &self.surround, region);
            for (o, v) in out.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *o -= self.surround_weight * v;
            }
        }
        out
    }
}

pub fn make_dog_kernel(params: &PathwayParams, grid: &VisualGrid) -> Result<DogKernel> {
    make_dog_kernel_with(params, grid, KernelOptions::default())
}

/// Samples the DoG on the pixel grid. The window is sized by the surround
/// Gaussian's coverage radius and never exceeds the grid.
pub fn make_dog_kernel_with(
    params: &PathwayParams,
    grid: &VisualGrid,
    options: KernelOptions,
) -> Result<DogKernel> {
    params.validate()?;
    grid.validate()?;
    let r_c_px = grid.deg_to_px(params.r_c);
    let r_s_px = grid.deg_to_px(params.r_s);
    let side = coverage_side(r_s_px, options.coverage, grid.resolution_px)?;
    let half = side / 2;
    // Beyond six radii the center Gaussian is below 1e-15 of its peak.
    let center_half = half.min((6.0 * r_c_px).ceil() as usize);
    let mut center = gaussian_1d(r_c_px, center_half);
    let mut surround = gaussian_1d(r_s_px, half);
    rescale_to_sum(&mut center, PI.sqrt() * r_c_px);
    rescale_to_sum(&mut surround, PI.sqrt() * r_s_px);
    Ok(DogKernel {
        half,
        center_half,
        center,
        surround,
        surround_weight: params.surround_weight(options.k_convention),
        raw_k_ratio: params.k_ratio,
        r_c_px,
        r_s_px,
    })
}

/// Unit-sum Gaussian pooling window of the contrast-normalization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolKernel {
    half: usize,
    weights: Vec<f64>,
}

impl PoolKernel {
    pub fn new(radius_deg: f64, grid: &VisualGrid, coverage: f64) -> Result<Self> {
        positive("r_cn", radius_deg)?;
        let r = grid.deg_to_px(radius_deg);
        let half = coverage_side(r, coverage, grid.resolution_px)? / 2;
        let mut weights = gaussian_1d(r, half);
        rescale_to_sum(&mut weights, 1.0);
        Ok(PoolKernel { half, weights })
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Result of light adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct LightAdapted {
    pub output: Grid,
    /// The input was all zero, so its mean is 0 and the ratio undefined.
    pub degenerate: bool,
}

#[inline]
fn adapt_pixel(x: f64, mean: f64, gamma: f64) -> f64 {
    if x == 0.0 {
        return -LIGHT_ADAPTATION_BIAS;
    }
    // x^γ / (x^γ + m^γ) written to stay finite for large γ.
    1.0 / (1.0 + (mean / x).powf(gamma)) - LIGHT_ADAPTATION_BIAS
}

fn check_pixels(image: &Grid) -> Result<f64> {
    if image.is_empty() {
        return Err(Error::invalid("image", "must be nonempty"));
    }
    let first = image.as_slice()[0];
    let mut sum = 0.0;
    let mut constant = true;
    for &v in image.as_slice() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(
                "image",
                format!("pixel value {v} is negative or non-finite"),
            ));
        }
        sum += v;
        constant &= v == first;
    }
    // A summed mean of a constant image can miss the constant by an ulp.
    Ok(if constant {
        first
    } else {
        sum / image.len() as f64
    })
}

/// Global luminance normalization `x^γ/(x^γ + x̄^γ) − ½`, with `x̄` the
/// spatial mean of the whole input.
pub fn light_adapt(image: &Grid, gamma: f64) -> Result<LightAdapted> {
    positive("gamma", gamma)?;
    let mean = check_pixels(image)?;
    if mean == 0.0 {
        return Ok(LightAdapted {
            output: Grid::zeros(image.height(), image.width()),
            degenerate: true,
        });
    }
    Ok(LightAdapted {
        output: image.map(|x| adapt_pixel(x, mean, gamma)),
        degenerate: false,
    })
}

fn light_adapt_region(image: &Grid, mean: f64, gamma: f64, region: Region) -> Grid {
    let mut out = Grid::zeros(image.height(), image.width());
    if mean == 0.0 {
        return out;
    }
    for r in region.row0..region.row1 {
        let src = image.row(r);
        for c in region.col0..region.col1 {
            out.set(r, c, adapt_pixel(src[c], mean, gamma));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpponentChannel {
    #[serde(rename = "P_rg")]
    PRg,
    #[serde(rename = "P_gr")]
    PGr,
    #[serde(rename = "P_by")]
    PBy,
    #[serde(rename = "M_achro")]
    MAchro,
}

impl OpponentChannel {
    /// Output channel order of the block.
    pub const ALL: [OpponentChannel; 4] = [
        OpponentChannel::PRg,
        OpponentChannel::PGr,
        OpponentChannel::PBy,
        OpponentChannel::MAchro,
    ];

    pub fn index(self) -> usize {
        match self {
            OpponentChannel::PRg => 0,
            OpponentChannel::PGr => 1,
            OpponentChannel::PBy => 2,
            OpponentChannel::MAchro => 3,
        }
    }

    pub fn cell_class(self) -> CellClass {
        match self {
            OpponentChannel::MAchro => CellClass::M,
            _ => CellClass::P,
        }
    }

    pub fn spec(self) -> OpponentChannelSpec {
        let third = 1.0 / 3.0;
        let (center_weights, surround_weights) = match self {
            OpponentChannel::PRg => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            OpponentChannel::PGr => ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0]),
            OpponentChannel::PBy => ([0.0, 0.0, 1.0], [0.5, 0.5, 0.0]),
            OpponentChannel::MAchro => ([third; 3], [third; 3]),
        };
        OpponentChannelSpec {
            channel_id: self,
            center_weights,
            surround_weights,
        }
    }
}

/// RGB weights feeding the center and surround Gaussians of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpponentChannelSpec {
    pub channel_id: OpponentChannel,
    pub center_weights: [f64; 3],
    pub surround_weights: [f64; 3],
}

impl OpponentChannelSpec {
    pub fn validate(&self) -> Result<()> {
        for w in [&self.center_weights, &self.surround_weights] {
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            if (l1 - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(
                    "opponent weights",
                    format!("L1 norm {l1} != 1"),
                ));
            }
        }
        if self.channel_id == OpponentChannel::MAchro
            && self.center_weights != self.surround_weights
        {
            return Err(Error::invalid(
                "opponent weights",
                "achromatic channel needs equal center and surround weights",
            ));
        }
        Ok(())
    }
}

fn weighted_sum(planes: [&Grid; 3], weights: [f64; 3]) -> Grid {
    let nonzero: Vec<usize> = (0..3).filter(|&i| weights[i] != 0.0).collect();
    let base = planes[0];
    if nonzero.len() == 1 && weights[nonzero[0]] == 1.0 {
        return planes[nonzero[0]].clone();
    }
    let mut out = Grid::zeros(base.height(), base.width());
    for &i in &nonzero {
        for (o, v) in out.as_mut_slice().iter_mut().zip(planes[i].as_slice()) {
            *o += weights[i] * v;
        }
    }
    out
}

/// Center and surround drives of one opponent channel.
pub fn opponent_project(image: &[Grid; 3], spec: &OpponentChannelSpec) -> Result<(Grid, Grid)> {
    if !image[0].same_shape(&image[1]) || !image[0].same_shape(&image[2]) {
        return Err(Error::Shape(
            "opponent projection needs equal planes".into(),
        ));
    }
    let planes = [&image[0], &image[1], &image[2]];
    Ok((
        weighted_sum(planes, spec.center_weights),
        weighted_sum(planes, spec.surround_weights),
    ))
}

/// `x / (c50 + sqrt(x² ⋆ w_CN))^n` with a unit-sum Gaussian pool.
pub fn contrast_normalize(x_dog: &Grid, params: &PathwayParams, grid: &VisualGrid) -> Result<Grid> {
    params.validate()?;
    let pool = PoolKernel::new(params.r_cn, grid, KERNEL_COVERAGE)?;
    Ok(normalize_with(x_dog, &pool, params.c50, params.n_cn))
}

fn normalize_with(x_dog: &Grid, pool: &PoolKernel, c50: f64, n: f64) -> Grid {
    let squared = x_dog.map(|v| v * v);
    let pooled = correlate_separable(&squared, pool.weights(), pool.weights());
    let data = x_dog
        .as_slice()
        .iter()
        .zip(pooled.as_slice())
        .map(|(&x, &p)| x / (c50 + p.max(0.0).sqrt()).powf(n))
        .collect();
    Grid::from_vec(x_dog.height(), x_dog.width(), data).expect("same shape")
}

/// Rectifies both polarities, subtracts, and checks the result reproduces
/// the input exactly. Returns the input.
pub fn push_pull_identity_check(x_cn: &Grid) -> Result<Grid> {
    for (index, &x) in x_cn.as_slice().iter().enumerate() {
        let on = x.max(0.0);
        let off = (-x).max(0.0);
        let y = on - off;
        let same = if x == 0.0 {
            y == 0.0
        } else {
            y.to_bits() == x.to_bits()
        };
        if !same {
            return Err(Error::PushPull { index, value: x });
        }
    }
    Ok(x_cn.clone())
}

/// Trial-to-trial noise applied to a stage output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Variance per unit is `fano·|activation|`.
    pub fano: f64,
    /// Mean evoked response (spikes per window) the activations are scaled to.
    pub spikes_mean_target: f64,
    pub integration_window_ms: f64,
}

/// Fano factor assigned to the subcortical stage; the cortical stage makes
/// up the rest of the unit end-to-end Fano factor.
pub const SUBCORTICAL_FANO: f64 = 0.25;

/// Mean evoked spike count per 50 ms window.
pub const SPIKES_MEAN_TARGET: f64 = 0.655;

pub const INTEGRATION_WINDOW_MS: f64 = 50.0;

impl NoiseSpec {
    pub fn subcortical() -> Self {
        NoiseSpec {
            fano: SUBCORTICAL_FANO,
            spikes_mean_target: SPIKES_MEAN_TARGET,
            integration_window_ms: INTEGRATION_WINDOW_MS,
        }
    }

    pub fn cortical() -> Self {
        NoiseSpec {
            fano: 1.0,
            spikes_mean_target: SPIKES_MEAN_TARGET,
            integration_window_ms: INTEGRATION_WINDOW_MS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fano.is_finite() && self.fano >= 0.0) {
            return Err(Error::invalid(
                "fano",
                format!("{} must be >= 0", self.fano),
            ));
        }
        positive("spikes_mean_target", self.spikes_mean_target)?;
        if self.integration_window_ms != INTEGRATION_WINDOW_MS {
            return Err(Error::invalid(
                "integration_window_ms",
                "the window is fixed at 50 ms",
            ));
        }
        Ok(())
    }
}

pub(crate) fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adds independent Gaussian noise of variance `fano·|a|` to every unit.
pub fn apply_noise(activations: &Grid, noise: &NoiseSpec, seed: u64) -> Result<Grid> {
    noise.validate()?;
    Ok(noise_with_fano(
        activations,
        noise.fano,
        &mut noise_rng(seed, 0),
    ))
}

pub(crate) fn noise_with_fano(activations: &Grid, fano: f64, rng: &mut ChaCha8Rng) -> Grid {
    if fano == 0.0 {
        return activations.clone();
    }
    let data = activations
        .as_slice()
        .iter()
        .map(|&a| {
            let z: f64 = StandardNormal.sample(rng);
            a + (fano * a.abs()).sqrt() * z
        })
        .collect();
    Grid::from_vec(activations.height(), activations.width(), data).expect("same shape")
}

/// Scale factor mapping the mean absolute activation of a calibration batch
/// onto `target`.
pub fn scale_to_spikes(batch: &[Grid], target: f64) -> Result<f64> {
    positive("target", target)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for g in batch {
        for &v in g.as_slice() {
            if !v.is_finite() {
                return Err(Error::NonFinite("calibration batch"));
            }
            sum += v.abs();
        }
        count += g.len();
    }
    if count == 0 || sum == 0.0 {
        return Err(Error::ZeroMeanResponse);
    }
    Ok(target / (sum / count as f64))
}

/// One pathway with its kernels precomputed.
#[derive(Debug, Clone)]
pub struct Pathway {
    params: PathwayParams,
    dog: DogKernel,
    pool: PoolKernel,
}

impl Pathway {
    pub fn new(params: PathwayParams, grid: &VisualGrid, options: KernelOptions) -> Result<Self> {
        let dog = make_dog_kernel_with(&params, grid, options)?;
        let pool = PoolKernel::new(params.r_cn, grid, options.coverage)?;
        Ok(Pathway { params, dog, pool })
    }

    pub fn params(&self) -> &PathwayParams {
        &self.params
    }

    pub fn dog(&self) -> &DogKernel {
        &self.dog
    }

    pub fn pool(&self) -> &PoolKernel {
        &self.pool
    }

    /// Full-grid, noise-free, unscaled output of one channel.
    pub fn forward_channel(&self, adapted: &[Grid; 3], channel: OpponentChannel) -> Result<Grid> {
        let spec = channel.spec();
        let (center, surround) = opponent_project(adapted, &spec)?;
        let x_dog = self
            .dog
            .apply_region(&center, &surround, Region::full(&center));
        Ok(normalize_with(
            &x_dog,
            &self.pool,
            self.params.c50,
            self.params.n_cn,
        ))
    }

    /// Noise-free, unscaled output of one channel at a single unit, computing
    /// only the neighbourhood that unit depends on.
    pub fn response_at(
        &self,
        image: &RgbImage,
        channel: OpponentChannel,
        row: usize,
        col: usize,
    ) -> Result<f64> {
        let region = Region {
            row0: row,
            row1: row + 1,
            col0: col,
            col1: col + 1,
        };
        Ok(self.forward_region(image, channel, region)?.get(0, 0))
    }

    /// Noise-free, unscaled output of one channel over `region`, computing
    /// only the neighbourhood the region depends on. Equal to the matching
    /// window of [`Pathway::forward_channel`].
    pub fn forward_region(
        &self,
        image: &RgbImage,
        channel: OpponentChannel,
        region: Region,
    ) -> Result<Grid> {
        let spec = channel.spec();
        let (h, w) = (image.height(), image.width());
        if region.row1 > h
            || region.col1 > w
            || region.row0 >= region.row1
            || region.col0 >= region.col1
        {
            return Err(Error::Shape(format!(
                "region {region:?} outside a {h}x{w} image"
            )));
        }
        let grow = |r: Region, by: usize| Region {
            row0: r.row0.saturating_sub(by),
            row1: (r.row1 + by).min(h),
            col0: r.col0.saturating_sub(by),
            col1: (r.col1 + by).min(w),
        };
        let pool_region = grow(region, self.pool.half);
        let la_region = grow(region, self.pool.half + self.dog.half);

        let adapted: [Grid; 3] = if image.is_achromatic() {
            let plane = image.plane(0);
            let mean = check_pixels(plane)?;
            let la = light_adapt_region(plane, mean, self.params.gamma, la_region);
            [la.clone(), la.clone(), la]
        } else {
            let mut out: Vec<Grid> = Vec::with_capacity(3);
            for (i, plane) in image.planes().iter().enumerate() {
                if spec.center_weights[i] != 0.0 || spec.surround_weights[i] != 0.0 {
                    let mean = check_pixels(plane)?;
                    out.push(light_adapt_region(
                        plane,
                        mean,
                        self.params.gamma,
                        la_region,
                    ));
                } else {
                    out.push(Grid::zeros(h, w));
                }
            }
            let b = out.pop().unwrap();
            let g = out.pop().unwrap();
            let r = out.pop().unwrap();
            [r, g, b]
        };
        let (center, surround) = opponent_project(&adapted, &spec)?;
        let local = self.dog.apply_region(&center, &surround, pool_region);

        // Re-embed the local DoG output so reflection follows image borders.
        let mut squared = Grid::zeros(h, w);
        for r in 0..local.height() {
            for c in 0..local.width() {
                let v = local.get(r, c);
                squared.set(pool_region.row0 + r, pool_region.col0 + c, v * v);
            }
        }
        let pooled =
            correlate_separable_region(&squared, &self.pool.weights, &self.pool.weights, region);
        let (c50, n) = (self.params.c50, self.params.n_cn);
        Ok(Grid::from_fn(region.height(), region.width(), |r, c| {
            let x = local.get(
                region.row0 - pool_region.row0 + r,
                region.col0 - pool_region.col0 + c,
            );
            x / (c50 + pooled.get(r, c).max(0.0).sqrt()).powf(n)
        }))
    }
}

/// Both pathways plus per-channel spike scaling.
#[derive(Debug, Clone)]
pub struct SubcorticalBlock {
    grid: VisualGrid,
    p: Pathway,
    m: Pathway,
    scales: [f64; 4],
    options: KernelOptions,
}

impl SubcorticalBlock {
    pub fn new(p: PathwayParams, m: PathwayParams, grid: VisualGrid) -> Result<Self> {
        Self::with_options(p, m, grid, KernelOptions::default())
    }

    pub fn with_options(
        p: PathwayParams,
        m: PathwayParams,
        grid: VisualGrid,
        options: KernelOptions,
    ) -> Result<Self> {
        grid.validate()?;
        Ok(SubcorticalBlock {
            grid,
            p: Pathway::new(p, &grid, options)?,
            m: Pathway::new(m, &grid, options)?,
            scales: [1.0; 4],
            options,
        })
    }

    pub fn tuned(grid: VisualGrid) -> Result<Self> {
        Self::new(PathwayParams::tuned_p(), PathwayParams::tuned_m(), grid)
    }

    pub fn grid(&self) -> &VisualGrid {
        &self.grid
    }

    pub fn options(&self) -> KernelOptions {
        self.options
    }

    pub fn pathway(&self, class: CellClass) -> &Pathway {
        match class {
            CellClass::P => &self.p,
            CellClass::M => &self.m,
        }
    }

    pub fn scales(&self) -> [f64; 4] {
        self.scales
    }

    pub fn set_scales(&mut self, scales: [f64; 4]) {
        self.scales = scales;
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        let n = self.grid.resolution_px;
        if image.height() != n || image.width() != n {
            return Err(Error::Shape(format!(
                "image is {}x{}, grid is {n}x{n}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Noise-free, scaled output in channel order `[P_rg, P_gr, P_by, M_achro]`.
    pub fn forward_clean(&self, image: &RgbImage) -> Result<Vec<Grid>> {
        self.check_image(image)?;
        let mut out = Vec::with_capacity(4);
        let mut adapted_cache: Option<(f64, [Grid; 3])> = None;
        for channel in OpponentChannel::ALL {
            let pathway = self.pathway(channel.cell_class());
            let gamma = pathway.params.gamma;
            let reuse = matches!(&adapted_cache, Some((g, _)) if *g == gamma);
            if !reuse {
                let planes: Vec<Grid> = image
                    .planes()
                    .iter()
                    .map(|p| light_adapt(p, gamma).map(|la| la.output))
                    .collect::<Result<_>>()?;
                let [r, g, b]: [Grid; 3] = planes.try_into().expect("three planes");
                adapted_cache = Some((gamma, [r, g, b]));
            }
            let adapted = &adapted_cache.as_ref().expect("filled above").1;
            let scale = self.scales[channel.index()];
            let y = pathway.forward_channel(adapted, channel)?;
            out.push(if scale == 1.0 {
                y
            } else {
                y.map(|v| v * scale)
            });
        }
        Ok(out)
    }

    /// Full forward pass; `noise` adds per-channel independent noise drawn
    /// from streams of `seed`.
    pub fn forward(&self, image: &RgbImage, noise: Option<(&NoiseSpec, u64)>) -> Result<Vec<Grid>> {
        let clean = self.forward_clean(image)?;
        match noise {
            None => Ok(clean),
            Some((spec, seed)) => {
                spec.validate()?;
                Ok(clean
                    .iter()
                    .enumerate()
                    .map(|(i, g)| noise_with_fano(g, spec.fano, &mut noise_rng(seed, i as u64)))
                    .collect())
            }
        }
    }

    /// Calibrates per-channel scales on a batch so each channel's mean
    /// absolute response equals `target`.
    pub fn calibrate(&mut self, batch: &[RgbImage], target: f64) -> Result<[f64; 4]> {
        self.scales = [1.0; 4];
        let mut per_channel: Vec<Vec<Grid>> = vec![Vec::new(); 4];
        for image in batch {
            for (i, g) in self.forward_clean(image)?.into_iter().enumerate() {
                per_channel[i].push(g);
            }
        }
        let mut scales = [1.0; 4];
        for (i, grids) in per_channel.iter().enumerate() {
            scales[i] = scale_to_spikes(grids, target)?;
        }
        self.scales = scales;
        Ok(scales)
    }
}

/// One subcortical unit as a harness cell: the noise-free, unscaled output
/// of `channel` at `(row, col)`.
#[derive(Debug, Clone, Copy)]
pub struct PathwayUnit<'a> {
    pub pathway: &'a Pathway,
    pub channel: OpponentChannel,
    pub row: usize,
    pub col: usize,
}

impl<'a> PathwayUnit<'a> {
    /// The unit at the grid centre.
    pub fn centered(pathway: &'a Pathway, channel: OpponentChannel, grid: &VisualGrid) -> Self {
        let c = grid.center_index();
        PathwayUnit {
            pathway,
            channel,
            row: c,
            col: c,
        }
    }
}

impl Cell for PathwayUnit<'_> {
    fn respond(&self, frame: &RgbImage) -> Result<f64> {
        self.pathway
            .response_at(frame, self.channel, self.row, self.col)
    }
}

/// Convenience wrapper over [`SubcorticalBlock::forward`].
pub fn subcortical_forward(
    image: &RgbImage,
    p: &PathwayParams,
    m: &PathwayParams,
    noise: Option<(&NoiseSpec, u64)>,
    grid: &VisualGrid,
) -> Result<Vec<Grid>> {
    SubcorticalBlock::new(*p, *m, *grid)?.forward(image, noise)
}
