//! In-silico neurophysiology: grating experiments, F1 extraction, response
//! model fits and the six response properties.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::grid::RgbImage;
use crate::optim::{minimize_multistart, Bounds, NelderMeadOptions};
use crate::stimuli::{render_grating_luminance, GratingSpec, VisualGrid};
use crate::subcortical::CellClass;

/// A unit under test: maps one stimulus frame to a scalar response.
pub trait Cell {
    fn respond(&self, frame: &RgbImage) -> Result<f64>;
}

impl<F> Cell for F
where
    F: Fn(&RgbImage) -> Result<f64>,
{
    fn respond(&self, frame: &RgbImage) -> Result<f64> {
        self(frame)
    }
}

/// Amplitude of the first harmonic of one cycle of samples,
/// `(2/N)·|Σ s_k·exp(−i2πk/N)|`.
pub fn f1_amplitude(samples: &[f64]) -> Result<f64> {
    if samples.len() < 3 {
        return Err(Error::invalid(
            "samples",
            "need at least 3 samples per cycle",
        ));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("F1 samples"));
    }
    let n = samples.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (k, s) in samples.iter().enumerate() {
        let (sin, cos) = (2.0 * PI * k as f64 / n).sin_cos();
        re += s * cos;
        im -= s * sin;
    }
    Ok(2.0 / n * re.hypot(im))
}

/// Mean of one cycle of samples.
pub fn f0_amplitude(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SfTuning,
    SizeTuning,
    ContrastResponse,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SfTuning => "sf_tuning",
            Experiment::SizeTuning => "size_tuning",
            Experiment::ContrastResponse => "contrast_response",
        }
    }
}

/// F1 responses over one stimulus sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub abscissa: Vec<f64>,
    pub f1: Vec<f64>,
    pub experiment: Experiment,
}

impl ResponseCurve {
    pub fn new(abscissa: Vec<f64>, f1: Vec<f64>, experiment: Experiment) -> Result<Self> {
        let curve = ResponseCurve {
            abscissa,
            f1,
            experiment,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.abscissa.len() != self.f1.len() {
            return Err(Error::Shape(format!(
                "{} abscissa values for {} responses",
                self.abscissa.len(),
                self.f1.len()
            )));
        }
        check_increasing("abscissa", &self.abscissa)?;
        if self.f1.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("f1", "responses must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.f1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f1.is_empty()
    }

    /// Uniformly rescaled copy.
    pub fn scaled(&self, factor: f64) -> ResponseCurve {
        ResponseCurve {
            abscissa: self.abscissa.clone(),
            f1: self.f1.iter().map(|v| v * factor).collect(),
            experiment: self.experiment,
        }
    }

    fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.f1.iter().enumerate() {
            if *v > self.f1[best] {
                best = i;
            }
        }
        best
    }
}

fn check_increasing(name: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(name, "must be strictly increasing"));
    }
    Ok(())
}

/// F1 of the cell's responses to every phase of one grating.
pub fn grating_f1(cell: &dyn Cell, spec: &GratingSpec, grid: &VisualGrid) -> Result<f64> {
    let responses = grating_responses(cell, spec, grid)?;
    f1_amplitude(&responses)
}

/// Cell responses to every phase of one grating, in phase order.
pub fn grating_responses(
    cell: &dyn Cell,
    spec: &GratingSpec,
    grid: &VisualGrid,
) -> Result<Vec<f64>> {
    let (planes, _, _) = render_grating_luminance(spec, grid)?;
    planes
        .into_iter()
        .map(|p| cell.respond(&RgbImage::gray(p)))
        .collect()
}

fn sweep(
    cell: &dyn Cell,
    grid: &VisualGrid,
    abscissa: &[f64],
    experiment: Experiment,
    make: impl Fn(f64) -> GratingSpec,
) -> Result<ResponseCurve> {
    check_increasing("sweep", abscissa)?;
    let f1 = abscissa
        .iter()
        .map(|&x| grating_f1(cell, &make(x), grid))
        .collect::<Result<Vec<_>>>()?;
    ResponseCurve::new(abscissa.to_vec(), f1, experiment)
}

pub fn run_sf_experiment(
    cell: &dyn Cell,
    grid: &VisualGrid,
    sf_list: &[f64],
    diameter_deg: f64,
    contrast: f64,
) -> Result<ResponseCurve> {
    sweep(cell, grid, sf_list, Experiment::SfTuning, |sf| {
        GratingSpec::new(diameter_deg, sf, contrast)
    })
}

pub fn run_size_experiment(
    cell: &dyn Cell,
    grid: &VisualGrid,
    diameters_deg: &[f64],
    sf_cpd: f64,
    contrast: f64,
) -> Result<ResponseCurve> {
    sweep(cell, grid, diameters_deg, Experiment::SizeTuning, |d| {
        GratingSpec::new(d, sf_cpd, contrast)
    })
}

pub fn run_contrast_experiment(
    cell: &dyn Cell,
    grid: &VisualGrid,
    contrasts: &[f64],
    sf_cpd: f64,
    diameter_deg: f64,
) -> Result<ResponseCurve> {
    sweep(cell, grid, contrasts, Experiment::ContrastResponse, |c| {
        GratingSpec::new(diameter_deg, sf_cpd, c)
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{experiment} fit needs at least {needed} points, got {got}")]
    TooFewPoints {
        experiment: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("{experiment} fit expects a {expected} curve")]
    WrongExperiment {
        experiment: &'static str,
        expected: &'static str,
    },
    #[error("{0} curve is degenerate (flat or all zero); parameters are unidentifiable")]
    Degenerate(&'static str),
    #[error("{experiment} fit did not converge; best relative residual {residual:.4}")]
    NotConverged {
        experiment: &'static str,
        residual: f64,
    },
    #[error("contrast curve needs a point at c <= 0.1 and one at c = 1")]
    ContrastCoverage,
}

/// Maximum relative RMS residual (RMS / max response) accepted from a fit.
pub const MAX_RELATIVE_RESIDUAL: f64 = 0.25;

const RESTARTS: usize = 8;

fn fit_options() -> NelderMeadOptions {
    NelderMeadOptions {
        max_evals: 3000,
        rel_tol: 1e-10,
        abs_tol: 1e-300,
        initial_step: 0.1,
    }
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Fits `y ≈ g·shape` for the best gain `g ≥ 0`; returns `(g, SSE)`.
fn project_gain(y: &[f64], shape: &[f64]) -> (f64, f64) {
    let ss: f64 = shape.iter().map(|s| s * s).sum();
    let g = if ss > 0.0 {
        (y.iter().zip(shape).map(|(a, b)| a * b).sum::<f64>() / ss).max(0.0)
    } else {
        0.0
    };
    let sse = y.iter().zip(shape).map(|(a, b)| (a - g * b).powi(2)).sum();
    (g, sse)
}

fn relative_residual(sse: f64, y: &[f64]) -> f64 {
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (sse / y.len() as f64).sqrt() / peak
}

fn check_curve(
    curve: &ResponseCurve,
    expected: Experiment,
    name: &'static str,
    min_points: usize,
) -> Result<(), FitError> {
    if curve.experiment != expected {
        return Err(FitError::WrongExperiment {
            experiment: name,
            expected: expected.name(),
        });
    }
    if curve.len() < min_points {
        return Err(FitError::TooFewPoints {
            experiment: name,
            needed: min_points,
            got: curve.len(),
        });
    }
    let max = curve.f1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = curve.f1.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || max - min <= 1e-9 * max {
        return Err(FitError::Degenerate(name));
    }
    Ok(())
}

/// Fitted difference-of-Gaussians spatial-frequency response
/// `A(f) = k_c·π·r_c²·exp(−(π·f·r_c)²) − k_s·π·r_s²·exp(−(π·f·r_s)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DogSfFit {
    pub r_c: f64,
    pub r_s: f64,
    pub k_c: f64,
    pub k_s: f64,
    pub relative_residual: f64,
}

/// Analytic frequency response of a DoG with radii in degrees and `f` in cpd.
pub fn dog_frequency_response(f: f64, r_c: f64, r_s: f64, k_c: f64, k_s: f64) -> f64 {
    k_c * PI * r_c * r_c * (-(PI * f * r_c).powi(2)).exp()
        - k_s * PI * r_s * r_s * (-(PI * f * r_s).powi(2)).exp()
}

impl DogSfFit {
    pub fn response(&self, f: f64) -> f64 {
        dog_frequency_response(f, self.r_c, self.r_s, self.k_c, self.k_s).abs()
    }

    /// Frequency of maximal response within `[lo, hi]`.
    pub fn peak_sf(&self, lo: f64, hi: f64) -> f64 {
        argmax_log(|f| self.response(f), lo, hi)
    }
}

/// Maximizer of `f` over `[lo, hi]`: dense log grid, then golden section.
fn argmax_log(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let grid = log_spaced(lo, hi, 241);
    let mut best = 0;
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    for i in 1..grid.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    let (mut a, mut b) = (
        grid[best.saturating_sub(1)].ln(),
        grid[(best + 1).min(grid.len() - 1)].ln(),
    );
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c.exp()) >= f(d.exp()) {
            b = d;
        } else {
            a = c;
        }
    }
    let x = ((a + b) / 2.0).exp();
    if f(x) >= values[best] {
        x
    } else {
        grid[best]
    }
}

fn dog_shape(f: &[f64], r_c: f64, r_s: f64, w: f64) -> Vec<f64> {
    f.iter()
        .map(|&x| ((-(PI * x * r_c).powi(2)).exp() - w * (-(PI * x * r_s).powi(2)).exp()).abs())
        .collect()
}

/// Least-squares DoG fit of an SF tuning curve. Radii come out in degrees.
pub fn fit_dog_sf(curve: &ResponseCurve) -> Result<DogSfFit, FitError> {
    const NAME: &str = "sf_tuning";
    check_curve(curve, Experiment::SfTuning, NAME, 6)?;
    let f = &curve.abscissa;
    let y = &curve.f1;
    // x = [ln r_c, ln(r_s/r_c), w], w = integrated surround/center ratio.
    let bounds = Bounds::new(
        vec![0.002f64.ln(), 1.05f64.ln(), 0.0],
        vec![5.0f64.ln(), 100.0f64.ln(), 20.0],
    );
    let objective = |x: &[f64]| {
        let r_c = x[0].exp();
        let shape = dog_shape(f, r_c, r_c * x[1].exp(), x[2]);
        project_gain(y, &shape).1
    };
    let starts: Vec<Vec<f64>> = log_spaced(0.005, 1.0, RESTARTS)
        .into_iter()
        .enumerate()
        .map(|(i, rc)| {
            let (ratio, w) = if i % 2 == 0 {
                (4.0f64, 0.4)
            } else {
                (8.0, 1.5)
            };
            vec![rc.ln(), ratio.ln(), w]
        })
        .collect();
    let best = minimize_multistart(objective, &starts, &bounds, &fit_options(), 6)
        .expect("at least one start");
    let r_c = best.x[0].exp();
    let r_s = r_c * best.x[1].exp();
    let w = best.x[2];
    let shape = dog_shape(f, r_c, r_s, w);
    let (gain, sse) = project_gain(y, &shape);
    let residual = relative_residual(sse, y);
    if !(residual <= MAX_RELATIVE_RESIDUAL) || gain <= 0.0 {
        return Err(FitError::NotConverged {
            experiment: NAME,
            residual,
        });
    }
    let k_c = gain / (PI * r_c * r_c);
    let k_s = w * k_c * r_c * r_c / (r_s * r_s);
    Ok(DogSfFit {
        r_c,
        r_s,
        k_c,
        k_s,
        relative_residual: residual,
    })
}

/// `(∫_{−d/2}^{d/2} exp(−(2u/r)²) du)²`
pub fn integrated_gaussian_sq(d: f64, r: f64) -> f64 {
    (r * PI.sqrt() / 2.0 * erf(d / r)).powi(2)
}

/// Fitted area-summation model `R(d) = K_e·L(d, r_e) − K_i·L(d, r_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaSummationFit {
    pub r_e: f64,
    pub r_i: f64,
    pub k_e: f64,
    pub k_i: f64,
    pub suppression_index: f64,
    pub relative_residual: f64,
}

impl AreaSummationFit {
    pub fn response(&self, d: f64) -> f64 {
        area_summation(d, self.r_e, self.r_i, self.k_e, self.k_i)
    }

    /// `R(d → ∞)`.
    pub fn asymptote(&self) -> f64 {
        PI / 4.0 * (self.k_e * self.r_e * self.r_e - self.k_i * self.r_i * self.r_i)
    }

    /// Diameter of maximal response within `[lo, hi]`.
    pub fn peak_diameter(&self, lo: f64, hi: f64) -> f64 {
        argmax_log(|d| self.response(d), lo, hi)
    }
}

pub fn area_summation(d: f64, r_e: f64, r_i: f64, k_e: f64, k_i: f64) -> f64 {
    k_e * integrated_gaussian_sq(d, r_e) - k_i * integrated_gaussian_sq(d, r_i)
}

/// `(R_peak − R_∞)/R_peak` of an area-summation model, in `[0, 1]`.
pub fn suppression_index(r_e: f64, r_i: f64, k_e: f64, k_i: f64) -> f64 {
    let asymptote = (PI / 4.0 * (k_e * r_e * r_e - k_i * r_i * r_i)).max(0.0);
    let hi = 50.0 * r_i.max(r_e);
    let lo = 1e-3 * r_e.min(r_i);
    let peak_d = argmax_log(|d| area_summation(d, r_e, r_i, k_e, k_i), lo, hi);
    let peak = area_summation(peak_d, r_e, r_i, k_e, k_i).max(asymptote);
    if peak <= 0.0 {
        return 0.0;
    }
    ((peak - asymptote) / peak).clamp(0.0, 1.0)
}

fn area_shape(d: &[f64], r_e: f64, ratio: f64, s: f64) -> Vec<f64> {
    let r_i = r_e * ratio;
    let w = s / (ratio * ratio);
    d.iter()
        .map(|&x| integrated_gaussian_sq(x, r_e) - w * integrated_gaussian_sq(x, r_i))
        .collect()
}

/// Least-squares area-summation fit of a size tuning curve.
///
/// Inhibition is parameterized as `K_i = s·K_e·r_e²/r_i²` with `s ∈ [0, 1]`
/// and `r_i > r_e`, so the large-aperture asymptote stays nonnegative.
pub fn fit_area_summation(curve: &ResponseCurve) -> Result<AreaSummationFit, FitError> {
    const NAME: &str = "size_tuning";
    check_curve(curve, Experiment::SizeTuning, NAME, 6)?;
    let d = &curve.abscissa;
    let y = &curve.f1;
    let bounds = Bounds::new(
        vec![0.005f64.ln(), 1.01f64.ln(), 0.0],
        vec![20.0f64.ln(), 100.0f64.ln(), 1.0],
    );
    let objective = |x: &[f64]| {
        let shape = area_shape(d, x[0].exp(), x[1].exp(), x[2]);
        project_gain(y, &shape).1
    };
    let starts: Vec<Vec<f64>> = log_spaced(0.02, 2.0, RESTARTS)
        .into_iter()
        .enumerate()
        .map(|(i, re)| {
            let (ratio, s) = if i % 2 == 0 {
                (3.0f64, 0.5)
            } else {
                (6.0, 0.9)
            };
            vec![re.ln(), ratio.ln(), s]
        })
        .collect();
    let best = minimize_multistart(objective, &starts, &bounds, &fit_options(), 6)
        .expect("at least one start");
    let r_e = best.x[0].exp();
    let ratio = best.x[1].exp();
    let s = best.x[2];
    let shape = area_shape(d, r_e, ratio, s);
    let (k_e, sse) = project_gain(y, &shape);
    let residual = relative_residual(sse, y);
    if !(residual <= MAX_RELATIVE_RESIDUAL) || k_e <= 0.0 {
        return Err(FitError::NotConverged {
            experiment: NAME,
            residual,
        });
    }
    let r_i = r_e * ratio;
    let k_i = s * k_e / (ratio * ratio);
    Ok(AreaSummationFit {
        r_e,
        r_i,
        k_e,
        k_i,
        suppression_index: suppression_index(r_e, r_i, k_e, k_i),
        relative_residual: residual,
    })
}

/// Fitted Naka–Rushton contrast response `R_max·c^q/(c^q + c50^q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NakaRushtonFit {
    pub r_max: f64,
    pub c50: f64,
    pub q: f64,
    pub saturation_index: f64,
    pub relative_residual: f64,
}

pub fn naka_rushton(c: f64, r_max: f64, c50: f64, q: f64) -> f64 {
    if c <= 0.0 {
        return 0.0;
    }
    let cq = c.powf(q);
    r_max * cq / (cq + c50.powf(q))
}

/// `1 − [R(1) − R(½)]/[R(½) − R(0)]`, clamped to `[0, 1]`.
pub fn saturation_index(response: impl Fn(f64) -> f64) -> f64 {
    let (r0, rh, r1) = (response(0.0), response(0.5), response(1.0));
    let low = rh - r0;
    if !(low > 0.0) {
        return if r1 > r0 { 0.0 } else { 1.0 };
    }
    (1.0 - (r1 - rh) / low).clamp(0.0, 1.0)
}

impl NakaRushtonFit {
    pub fn response(&self, c: f64) -> f64 {
        naka_rushton(c, self.r_max, self.c50, self.q)
    }
}

pub fn fit_contrast_response(curve: &ResponseCurve) -> Result<NakaRushtonFit, FitError> {
    const NAME: &str = "contrast_response";
    check_curve(curve, Experiment::ContrastResponse, NAME, 5)?;
    let c = &curve.abscissa;
    let y = &curve.f1;
    if !(c.iter().any(|&v| v <= 0.1) && c.iter().any(|&v| v == 1.0)) {
        return Err(FitError::ContrastCoverage);
    }
    let bounds = Bounds::new(
        vec![1e-3f64.ln(), 0.1f64.ln()],
        vec![1e4f64.ln(), 10.0f64.ln()],
    );
    let shape = |c50: f64, q: f64| -> Vec<f64> {
        c.iter().map(|&x| naka_rushton(x, 1.0, c50, q)).collect()
    };
    let objective = |x: &[f64]| project_gain(y, &shape(x[0].exp(), x[1].exp())).1;
    let starts: Vec<Vec<f64>> = log_spaced(0.01, 100.0, RESTARTS)
        .into_iter()
        .enumerate()
        .map(|(i, c50)| vec![c50.ln(), if i % 2 == 0 { 1.0f64.ln() } else { 2.5f64.ln() }])
        .collect();
    let best = minimize_multistart(objective, &starts, &bounds, &fit_options(), 6)
        .expect("at least one start");
    let (c50, q) = (best.x[0].exp(), best.x[1].exp());
    let (r_max, sse) = project_gain(y, &shape(c50, q));
    let residual = relative_residual(sse, y);
    if !(residual <= MAX_RELATIVE_RESIDUAL) || r_max <= 0.0 {
        return Err(FitError::NotConverged {
            experiment: NAME,
            residual,
        });
    }
    Ok(NakaRushtonFit {
        r_max,
        c50,
        q,
        saturation_index: saturation_index(|x| naka_rushton(x, r_max, c50, q)),
        relative_residual: residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    CenterRadius,
    SurroundRadius,
    ExcitationRadius,
    InhibitionRadius,
    SuppressionIndex,
    SaturationIndex,
}

impl Property {
    pub const ALL: [Property; 6] = [
        Property::CenterRadius,
        Property::SurroundRadius,
        Property::ExcitationRadius,
        Property::InhibitionRadius,
        Property::SuppressionIndex,
        Property::SaturationIndex,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Property::CenterRadius => "center_radius_deg",
            Property::SurroundRadius => "surround_radius_deg",
            Property::ExcitationRadius => "excitation_radius_deg",
            Property::InhibitionRadius => "inhibition_radius_deg",
            Property::SuppressionIndex => "suppression_index",
            Property::SaturationIndex => "saturation_index",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The six response properties of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySet {
    pub center_radius_deg: f64,
    pub surround_radius_deg: f64,
    pub excitation_radius_deg: f64,
    pub inhibition_radius_deg: f64,
    pub suppression_index: f64,
    pub saturation_index: f64,
}

impl PropertySet {
    pub fn from_array(v: [f64; 6]) -> Self {
        PropertySet {
            center_radius_deg: v[0],
            surround_radius_deg: v[1],
            excitation_radius_deg: v[2],
            inhibition_radius_deg: v[3],
            suppression_index: v[4],
            saturation_index: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.center_radius_deg,
            self.surround_radius_deg,
            self.excitation_radius_deg,
            self.inhibition_radius_deg,
            self.suppression_index,
            self.saturation_index,
        ]
    }

    pub fn get(&self, p: Property) -> f64 {
        self.to_array()[p.index()]
    }

    /// Mean foveal LGN response properties used as tuning targets.
    pub fn reference_targets(class: CellClass) -> Self {
        match class {
            CellClass::P => PropertySet::from_array([0.042, 0.279, 0.236, 0.564, 0.808, 0.095]),
            CellClass::M => PropertySet::from_array([0.063, 0.602, 0.289, 0.869, 0.719, 0.365]),
        }
    }

    /// Property values reported for a previously tuned front-end; used as
    /// the reproduction check for the tuner.
    pub fn reported_tuned(class: CellClass) -> Self {
        match class {
            CellClass::P => PropertySet::from_array([0.042, 0.162, 0.070, 0.312, 0.813, 0.200]),
            CellClass::M => PropertySet::from_array([0.066, 0.565, 0.116, 0.411, 0.539, 0.470]),
        }
    }

    /// Checks the ordering and range invariants.
    pub fn validate(&self) -> Result<()> {
        let v = self.to_array();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("property set"));
        }
        if v[..4].iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("radii", "must be > 0"));
        }
        if self.surround_radius_deg <= self.center_radius_deg {
            return Err(Error::invalid(
                "surround_radius_deg",
                "must exceed the center radius",
            ));
        }
        if self.inhibition_radius_deg <= self.excitation_radius_deg {
            return Err(Error::invalid(
                "inhibition_radius_deg",
                "must exceed the excitation radius",
            ));
        }
        if !(0.0..=1.0).contains(&self.suppression_index)
            || !(0.0..=1.0).contains(&self.saturation_index)
        {
            return Err(Error::invalid("indices", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Measured properties with per-property failure markers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredProperties {
    pub center_radius_deg: Option<f64>,
    pub surround_radius_deg: Option<f64>,
    pub excitation_radius_deg: Option<f64>,
    pub inhibition_radius_deg: Option<f64>,
    pub suppression_index: Option<f64>,
    pub saturation_index: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

impl MeasuredProperties {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.center_radius_deg,
            self.surround_radius_deg,
            self.excitation_radius_deg,
            self.inhibition_radius_deg,
            self.suppression_index,
            self.saturation_index,
        ]
    }

    pub fn get(&self, p: Property) -> Option<f64> {
        self.values()[p.index()]
    }

    fn set(&mut self, p: Property, v: f64) {
        let slot = match p {
            Property::CenterRadius => &mut self.center_radius_deg,
            Property::SurroundRadius => &mut self.surround_radius_deg,
            Property::ExcitationRadius => &mut self.excitation_radius_deg,
            Property::InhibitionRadius => &mut self.inhibition_radius_deg,
            Property::SuppressionIndex => &mut self.suppression_index,
            Property::SaturationIndex => &mut self.saturation_index,
        };
        *slot = Some(v);
    }

    fn fail(&mut self, p: Property, reason: &str) {
        self.errors.insert(p.key().to_string(), reason.to_string());
    }

    pub fn complete(&self) -> Option<PropertySet> {
        let v = self.values();
        if v.iter().all(Option::is_some) {
            Some(PropertySet::from_array(v.map(|x| x.expect("checked"))))
        } else {
            None
        }
    }
}

impl From<PropertySet> for MeasuredProperties {
    fn from(p: PropertySet) -> Self {
        let mut m = MeasuredProperties::default();
        for prop in Property::ALL {
            m.set(prop, p.get(prop));
        }
        m
    }
}

/// Stimulus sweeps of one property measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sf_cpd: Vec<f64>,
    pub sf_diameter_deg: f64,
    pub sf_contrast: f64,
    pub diameters_deg: Vec<f64>,
    pub size_contrast: f64,
    pub contrasts: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sf_cpd: log_spaced(0.1, 16.0, 16),
            sf_diameter_deg: 7.0,
            sf_contrast: 1.0,
            diameters_deg: log_spaced(0.1, 7.0, 14),
            size_contrast: 1.0,
            contrasts: vec![0.03, 0.06, 0.125, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Everything produced by [`measure_properties`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub properties: MeasuredProperties,
    pub sf_curve: ResponseCurve,
    pub size_curve: ResponseCurve,
    pub contrast_curve: ResponseCurve,
    pub sf_fit: Option<DogSfFit>,
    pub area_fit: Option<AreaSummationFit>,
    pub contrast_fit: Option<NakaRushtonFit>,
    pub peak_sf_cpd: f64,
    pub peak_diameter_deg: f64,
}

/// Runs the SF, size and contrast experiments in sequence, feeding the peak
/// SF into the later two and the peak diameter into the contrast sweep.
pub fn measure_properties(
    cell: &dyn Cell,
    grid: &VisualGrid,
    sweeps: &SweepConfig,
) -> Result<Measurement> {
    let mut props = MeasuredProperties::default();

    let sf_curve = run_sf_experiment(
        cell,
        grid,
        &sweeps.sf_cpd,
        sweeps.sf_diameter_deg,
        sweeps.sf_contrast,
    )?;
    let (sf_lo, sf_hi) = (sweeps.sf_cpd[0], *sweeps.sf_cpd.last().expect("nonempty"));
    let sf_fit = match fit_dog_sf(&sf_curve) {
        Ok(fit) => {
            props.set(Property::CenterRadius, fit.r_c);
            props.set(Property::SurroundRadius, fit.r_s);
            Some(fit)
        }
        Err(e) => {
            props.fail(Property::CenterRadius, &e.to_string());
            props.fail(Property::SurroundRadius, &e.to_string());
            None
        }
    };
    let peak_sf = match &sf_fit {
        Some(fit) => fit.peak_sf(sf_lo, sf_hi),
        None => sf_curve.abscissa[sf_curve.argmax()],
    };

    let size_curve = run_size_experiment(
        cell,
        grid,
        &sweeps.diameters_deg,
        peak_sf,
        sweeps.size_contrast,
    )?;
    let (d_lo, d_hi) = (
        sweeps.diameters_deg[0],
        *sweeps.diameters_deg.last().expect("nonempty"),
    );
    let area_fit = match fit_area_summation(&size_curve) {
        Ok(fit) => {
            props.set(Property::ExcitationRadius, fit.r_e);
            props.set(Property::InhibitionRadius, fit.r_i);
            props.set(Property::SuppressionIndex, fit.suppression_index);
            Some(fit)
        }
        Err(e) => {
            for p in [
                Property::ExcitationRadius,
                Property::InhibitionRadius,
                Property::SuppressionIndex,
            ] {
                props.fail(p, &e.to_string());
            }
            None
        }
    };
    let peak_diameter = match &area_fit {
        Some(fit) => fit.peak_diameter(d_lo, d_hi),
        None => size_curve.abscissa[size_curve.argmax()],
    };

    let contrast_curve =
        run_contrast_experiment(cell, grid, &sweeps.contrasts, peak_sf, peak_diameter)?;
    let contrast_fit = match fit_contrast_response(&contrast_curve) {
        Ok(fit) => {
            props.set(Property::SaturationIndex, fit.saturation_index);
            Some(fit)
        }
        Err(e) => {
            props.fail(Property::SaturationIndex, &e.to_string());
            None
        }
    };

    Ok(Measurement {
        properties: props,
        sf_curve,
        size_curve,
        contrast_curve,
        sf_fit,
        area_fit,
        contrast_fit,
        peak_sf_cpd: peak_sf,
        peak_diameter_deg: peak_diameter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert!(f1_amplitude(&[0.7; 12]).unwrap().abs() < 1e-15);
        let cos: Vec<f64> = (0..12)
            .map(|k| (2.0 * PI * k as f64 / 12.0).cos())
            .collect();
        assert!((f1_amplitude(&cos).unwrap() - 1.0).abs() < 1e-15);
        let shifted: Vec<f64> = (0..12)
            .map(|k| 3.0 + 2.0 * (2.0 * PI * k as f64 / 12.0 + 0.7).cos())
            .collect();
        assert!((f1_amplitude(&shifted).unwrap() - 2.0).abs() < 1e-9);
        assert!(f1_amplitude(&[1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn curve_validation() {
        assert!(ResponseCurve::new(vec![1.0, 1.0], vec![0.0, 0.0], Experiment::SfTuning).is_err());
        assert!(ResponseCurve::new(vec![1.0], vec![0.0, 0.0], Experiment::SfTuning).is_err());
        assert!(ResponseCurve::new(vec![1.0, 2.0], vec![0.0, -1.0], Experiment::SfTuning).is_err());
    }

    fn dog_curve(r_c: f64, r_s: f64, k_c: f64, k_s: f64) -> ResponseCurve {
        let f = SweepConfig::default().sf_cpd;
        let y = f
            .iter()
            .map(|&x| dog_frequency_response(x, r_c, r_s, k_c, k_s).abs())
            .collect();
        ResponseCurve::new(f, y, Experiment::SfTuning).unwrap()
    }

    #[test]
    fn dog_fit_recovers_radii() {
        let k_c = 1.0;
        let k_s = 0.03;
        let curve = dog_curve(0.042, 0.162, k_c, k_s);
        let fit = fit_dog_sf(&curve).unwrap();
        assert!((fit.r_c / 0.042 - 1.0).abs() < 0.01, "{fit:?}");
        assert!((fit.r_s / 0.162 - 1.0).abs() < 0.01, "{fit:?}");

        let scaled = fit_dog_sf(&curve.scaled(37.5)).unwrap();
        assert!((scaled.r_c / fit.r_c - 1.0).abs() < 1e-6);
        assert!((scaled.r_s / fit.r_s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dog_fit_rejects_flat_and_short_curves() {
        let f = SweepConfig::default().sf_cpd;
        let flat = ResponseCurve::new(f.clone(), vec![2.0; f.len()], Experiment::SfTuning).unwrap();
        assert!(matches!(fit_dog_sf(&flat), Err(FitError::Degenerate(_))));
        let short = ResponseCurve::new(
            f[..4].to_vec(),
            vec![1.0, 2.0, 3.0, 1.0],
            Experiment::SfTuning,
        )
        .unwrap();
        assert!(matches!(
            fit_dog_sf(&short),
            Err(FitError::TooFewPoints { .. })
        ));
    }

    fn size_curve(r_e: f64, r_i: f64, k_e: f64, k_i: f64) -> ResponseCurve {
        let d = SweepConfig::default().diameters_deg;
        let y = d
            .iter()
            .map(|&x| area_summation(x, r_e, r_i, k_e, k_i))
            .collect();
        ResponseCurve::new(d, y, Experiment::SizeTuning).unwrap()
    }

    #[test]
    fn area_fit_without_inhibition() {
        let fit = fit_area_summation(&size_curve(0.3, 0.9, 2.0, 0.0)).unwrap();
        assert!(fit.suppression_index < 1e-6, "{fit:?}");
        assert!((fit.r_e / 0.3 - 1.0).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn saturation_index_definition() {
        assert_eq!(saturation_index(|c| 3.0 * c), 0.0);
        assert_eq!(saturation_index(|c| if c > 0.0 { 1.0 } else { 0.0 }), 1.0);
    }

    #[test]
    fn contrast_fit_recovers_naka_rushton() {
        let c = SweepConfig::default().contrasts;
        let y: Vec<f64> = c.iter().map(|&x| naka_rushton(x, 4.0, 0.3, 2.0)).collect();
        let fit =
            fit_contrast_response(&ResponseCurve::new(c, y, Experiment::ContrastResponse).unwrap())
                .unwrap();
        assert!((fit.c50 / 0.3 - 1.0).abs() < 0.01, "{fit:?}");
        assert!((fit.q / 2.0 - 1.0).abs() < 0.01, "{fit:?}");
        assert!((fit.r_max / 4.0 - 1.0).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn contrast_fit_needs_low_and_full_contrast() {
        let c = vec![0.2, 0.3, 0.5, 0.75, 1.0];
        let y: Vec<f64> = c.iter().map(|&x| naka_rushton(x, 1.0, 0.3, 2.0)).collect();
        let curve = ResponseCurve::new(c, y, Experiment::ContrastResponse).unwrap();
        assert_eq!(
            fit_contrast_response(&curve),
            Err(FitError::ContrastCoverage)
        );
    }
}
