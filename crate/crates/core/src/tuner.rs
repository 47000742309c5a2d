//! Bayesian optimization of pathway parameters against mean response
//! property targets.
//!
//! The objective is `Σ_i log2(R_i / r̄_i)²` over the six properties. The
//! first `n_init` points come from a scrambled Sobol sequence; after that a
//! Gaussian-process surrogate proposes each point through an acquisition
//! function drawn uniformly from LCB, EI and PI.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::neurophys::{
    measure_properties, MeasuredProperties, Measurement, Property, PropertySet, SweepConfig,
};
use crate::optim::{nelder_mead, Bounds, NelderMeadOptions};
use crate::stimuli::VisualGrid;
use crate::subcortical::{
    CellClass, KernelOptions, OpponentChannel, Pathway, PathwayParams, PathwayUnit,
};

/// Loss contribution of a property that could not be measured.
pub const FAILED_PROPERTY_PENALTY: f64 = 16.0;

/// `Σ_i log2(R_i / r̄_i)²`; missing or nonpositive measurements add
/// [`FAILED_PROPERTY_PENALTY`] each.
pub fn loss(measured: &MeasuredProperties, targets: &PropertySet) -> Result<f64> {
    check_targets(targets)?;
    Ok(Property::ALL
        .iter()
        .map(|&p| match measured.get(p) {
            Some(v) if v > 0.0 && v.is_finite() => (v / targets.get(p)).log2().powi(2),
            _ => FAILED_PROPERTY_PENALTY,
        })
        .sum())
}

/// [`loss`] for a complete property set.
pub fn property_loss(measured: &PropertySet, targets: &PropertySet) -> Result<f64> {
    loss(&MeasuredProperties::from(*measured), targets)
}

fn check_targets(targets: &PropertySet) -> Result<()> {
    if targets
        .to_array()
        .iter()
        .any(|&t| !(t > 0.0 && t.is_finite()))
    {
        return Err(Error::invalid(
            "targets",
            "every target must be finite and > 0",
        ));
    }
    Ok(())
}

/// Names of the searched dimensions, in vector order.
pub const DIMENSION_NAMES: [&str; 7] = [
    "gamma", "r_c_deg", "r_s_deg", "k_ratio", "r_cn_deg", "c50", "n_cn",
];

/// Upper bound of the M-pathway centre radius. The tabulated value 0.76 deg
/// breaks the symmetric-interval construction of the other radius bounds;
/// 0.076 deg restores it and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MCenterBound {
    #[default]
    Narrow,
    Wide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// Box over `[gamma, r_c, r_s, k_ratio, r_cn, c50, n_cn]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
    pub cell_class: CellClass,
}

impl SearchSpace {
    pub fn default_for(class: CellClass) -> Self {
        Self::with_m_center_bound(class, MCenterBound::Narrow)
    }

    pub fn with_m_center_bound(class: CellClass, bound: MCenterBound) -> Self {
        let table: [(f64, f64); 7] = match class {
            CellClass::P => [
                (0.01, 2.0),
                (0.034, 0.050),
                (0.223, 0.335),
                (-0.068, -0.003),
                (0.140, 0.419),
                (0.01, 1.0),
                (0.01, 1.0),
            ],
            CellClass::M => [
                (0.01, 2.0),
                (
                    0.050,
                    match bound {
                        MCenterBound::Narrow => 0.076,
                        MCenterBound::Wide => 0.76,
                    },
                ),
                (0.482, 0.722),
                (-0.037, -0.002),
                (0.301, 0.903),
                (0.01, 1.0),
                (0.01, 1.0),
            ],
        };
        SearchSpace {
            dims: DIMENSION_NAMES
                .iter()
                .zip(table)
                .map(|(n, (lower, upper))| Dimension {
                    name: n.to_string(),
                    lower,
                    upper,
                })
                .collect(),
            cell_class: class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != DIMENSION_NAMES.len()
            || self
                .dims
                .iter()
                .zip(DIMENSION_NAMES)
                .any(|(d, n)| d.name != n)
        {
            return Err(Error::invalid(
                "space",
                format!("dimensions must be {DIMENSION_NAMES:?} in order"),
            ));
        }
        self.validate_bounds()
    }

    /// Checks only that every dimension is a finite, nonempty interval;
    /// enough for the generic optimizer pieces.
    pub fn validate_bounds(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::invalid("space", "needs at least one dimension"));
        }
        for d in &self.dims {
            if !(d.lower.is_finite() && d.upper.is_finite() && d.lower < d.upper) {
                return Err(Error::invalid(
                    "space",
                    format!("{}: need lower < upper", d.name),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::new(
            self.dims.iter().map(|d| d.lower).collect(),
            self.dims.iter().map(|d| d.upper).collect(),
        )
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(u)
            .map(|(d, &v)| (d.lower + v * (d.upper - d.lower)).clamp(d.lower, d.upper))
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(x)
            .map(|(d, &v)| (v - d.lower) / (d.upper - d.lower))
            .collect()
    }

    pub fn to_params(&self, x: &[f64]) -> PathwayParams {
        PathwayParams {
            gamma: x[0],
            r_c: x[1],
            r_s: x[2],
            k_ratio: x[3],
            r_cn: x[4],
            c50: x[5],
            n_cn: x[6],
            cell_class: self.cell_class,
        }
    }

    pub fn from_params(p: &PathwayParams) -> Vec<f64> {
        vec![p.gamma, p.r_c, p.r_s, p.k_ratio, p.r_cn, p.c50, p.n_cn]
    }

    /// Names of the dimensions where `p` lies outside the box.
    pub fn violations(&self, p: &PathwayParams) -> Vec<String> {
        Self::from_params(p)
            .iter()
            .zip(&self.dims)
            .filter(|(v, d)| !(**v >= d.lower && **v <= d.upper))
            .map(|(v, d)| format!("{} = {v} outside [{}, {}]", d.name, d.lower, d.upper))
            .collect()
    }
}

// Primitive polynomials and initial direction numbers (Joe & Kuo) for
// dimensions 2..=16: (degree, coefficients, m_1..m_s).
const SOBOL_TABLE: [(u32, u32, &[u32]); 15] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

pub const SOBOL_MAX_DIM: usize = SOBOL_TABLE.len() + 1;
const SOBOL_BITS: usize = 32;

fn direction_numbers(dim: usize) -> Vec<[u32; SOBOL_BITS]> {
    let mut out = Vec::with_capacity(dim);
    let mut first = [0u32; SOBOL_BITS];
    for (k, v) in first.iter_mut().enumerate() {
        *v = 1u32 << (31 - k);
    }
    out.push(first);
    for &(s, a, m) in SOBOL_TABLE.iter().take(dim.saturating_sub(1)) {
        let s = s as usize;
        let mut v = [0u32; SOBOL_BITS];
        for k in 0..s {
            v[k] = m[k] << (31 - k);
        }
        for k in s..SOBOL_BITS {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for l in 1..s {
                if (a >> (s - 1 - l)) & 1 == 1 {
                    x ^= v[k - l];
                }
            }
            v[k] = x;
        }
        out.push(v);
    }
    out
}

/// First `n` points of the Sobol sequence in `[0, 1)^dim`, optionally
/// scrambled by a seeded random digital shift.
pub fn sobol_points(dim: usize, n: usize, shift_seed: Option<u64>) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || dim > SOBOL_MAX_DIM {
        return Err(Error::invalid(
            "dim",
            format!("must be in 1..={SOBOL_MAX_DIM}"),
        ));
    }
    if n as u64 > 1u64 << SOBOL_BITS {
        return Err(Error::invalid("n", "exceeds the sequence period"));
    }
    let v = direction_numbers(dim);
    let shift: Vec<u32> = match shift_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..dim).map(|_| rng.random::<u32>()).collect()
        }
        None => vec![0; dim],
    };
    let mut x = vec![0u32; dim];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let c = (i - 1).trailing_ones() as usize;
            for (xj, vj) in x.iter_mut().zip(&v) {
                *xj ^= vj[c];
            }
        }
        out.push(
            x.iter()
                .zip(&shift)
                .map(|(&a, &s)| (a ^ s) as f64 / 4_294_967_296.0)
                .collect(),
        );
    }
    Ok(out)
}

/// First `n` scrambled Sobol points mapped into the search box.
pub fn sobol_init(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    space.validate_bounds()?;
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    Ok(sobol_points(space.dim(), n, Some(seed))?
        .iter()
        .map(|u| space.from_unit(u))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    Lcb,
    Ei,
    Pi,
}

impl Acquisition {
    pub const ALL: [Acquisition; 3] = [Acquisition::Lcb, Acquisition::Ei, Acquisition::Pi];
}

/// Matérn-5/2 ARD kernel hyperparameters, all on a log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengths: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

const LOG_LENGTH_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091); // ln 0.01, ln 100
const LOG_SIGNAL_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 6.907_755_278_982_137); // ln 0.01, ln 1000
const LOG_NOISE_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, 0.0); // ln 1e-6, ln 1

impl GpHyper {
    pub fn initial(dim: usize) -> Self {
        GpHyper {
            log_lengths: vec![0.0; dim],
            log_signal_var: 0.0,
            log_noise_var: (1e-2f64).ln(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengths.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        GpHyper {
            log_lengths: v[..d].to_vec(),
            log_signal_var: v[d],
            log_noise_var: v[d + 1],
        }
    }

    fn bounds(dim: usize) -> Vec<(f64, f64)> {
        let mut b = vec![LOG_LENGTH_BOUNDS; dim];
        b.push(LOG_SIGNAL_BOUNDS);
        b.push(LOG_NOISE_BOUNDS);
        b
    }
}

const SQRT5: f64 = 2.236_067_977_499_79;

fn matern52(r: f64) -> f64 {
    (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
}

fn scaled_dist(a: &[f64], b: &[f64], inv_len: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv_len)
        .map(|((x, y), il)| ((x - y) * il).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian-process regression on the unit cube with standardized outputs.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    inv_len: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn gram(x: &[Vec<f64>], hyper: &GpHyper) -> DMatrix<f64> {
    let n = x.len();
    let inv_len: Vec<f64> = hyper.log_lengths.iter().map(|l| (-l).exp()).collect();
    let sf2 = hyper.log_signal_var.exp();
    let sn2 = hyper.log_noise_var.exp();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sf2 + sn2;
        for j in 0..i {
            let v = sf2 * matern52(scaled_dist(&x[i], &x[j], &inv_len));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with growing diagonal jitter for near-singular Gram matrices.
fn robust_cholesky(mut k: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut jitter = 0.0;
    for attempt in 0..8 {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Some(c);
        }
        let add = 1e-10 * 10f64.powi(attempt);
        for i in 0..n {
            k[(i, i)] += add - jitter;
        }
        jitter = add;
    }
    None
}

/// Log marginal likelihood and its gradient with respect to the log
/// hyperparameters.
fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y: &DVector<f64>,
    hyper: &GpHyper,
) -> Option<(f64, Vec<f64>)> {
    let n = x.len();
    let d = hyper.log_lengths.len();
    let k = gram(x, hyper);
    let chol = robust_cholesky(k)?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .take(n)
        .map(|v| v.ln())
        .sum::<f64>()
        * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();

    // W = ααᵀ − K⁻¹; dLML/dθ = ½·tr(W·∂K/∂θ).
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let inv_len: Vec<f64> = hyper.log_lengths.iter().map(|l| (-l).exp()).collect();
    let sf2 = hyper.log_signal_var.exp();
    let sn2 = hyper.log_noise_var.exp();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        grad[d] += 0.5 * w[(i, i)] * sf2;
        grad[d + 1] += 0.5 * w[(i, i)] * sn2;
        for j in 0..i {
            let r = scaled_dist(&x[i], &x[j], &inv_len);
            let e = (-SQRT5 * r).exp();
            let wij = w[(i, j)];
            // Off-diagonal pairs appear twice in the trace.
            grad[d] += wij * sf2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e;
            let common = wij * sf2 * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
            for (l, g) in grad.iter_mut().take(d).enumerate() {
                let delta = (x[i][l] - x[j][l]) * inv_len[l];
                *g += common * delta * delta;
            }
        }
    }
    Some((lml, grad))
}

/// Maximizes the log marginal likelihood by Rprop from `start`.
fn fit_hyper(x: &[Vec<f64>], y: &DVector<f64>, start: &GpHyper, iterations: usize) -> GpHyper {
    let bounds = GpHyper::bounds(start.log_lengths.len());
    let mut theta = start.to_vec();
    let mut step = vec![0.1f64; theta.len()];
    let mut prev_grad = vec![0.0; theta.len()];
    let mut best = match log_marginal_likelihood(x, y, start) {
        Some((lml, _)) => (lml, theta.clone()),
        None => (f64::NEG_INFINITY, theta.clone()),
    };
    for _ in 0..iterations {
        let Some((lml, grad)) = log_marginal_likelihood(x, y, &GpHyper::from_vec(&theta)) else {
            break;
        };
        if lml > best.0 {
            best = (lml, theta.clone());
        }
        for i in 0..theta.len() {
            let s = grad[i] * prev_grad[i];
            if s > 0.0 {
                step[i] = (step[i] * 1.2).min(1.0);
            } else if s < 0.0 {
                step[i] = (step[i] * 0.5).max(1e-6);
            }
            // After a sign change the step is skipped and the memory cleared.
            let g = if s < 0.0 { 0.0 } else { grad[i] };
            if g != 0.0 {
                theta[i] = (theta[i] + g.signum() * step[i]).clamp(bounds[i].0, bounds[i].1);
            }
            prev_grad[i] = g;
        }
    }
    if let Some((lml, _)) = log_marginal_likelihood(x, y, &GpHyper::from_vec(&theta)) {
        if lml > best.0 {
            best = (lml, theta);
        }
    }
    GpHyper::from_vec(&best.1)
}

impl GaussianProcess {
    /// Fits the surrogate with fixed hyperparameters. `x` must lie in the
    /// unit cube; `y` is standardized internally.
    pub fn fit(x: Vec<Vec<f64>>, y: &[f64], hyper: GpHyper) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Shape("GP needs one target per input".into()));
        }
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_std));
        let chol = robust_cholesky(gram(&x, &hyper)).ok_or(Error::NonFinite("GP Gram matrix"))?;
        let alpha = chol.solve(&ys);
        let inv_len = hyper.log_lengths.iter().map(|l| (-l).exp()).collect();
        Ok(GaussianProcess {
            x,
            y_mean,
            y_std,
            hyper,
            inv_len,
            chol,
            alpha,
        })
    }

    /// Fits with maximum-likelihood hyperparameters, starting from `start`.
    pub fn fit_ml(x: Vec<Vec<f64>>, y: &[f64], start: &GpHyper, iterations: usize) -> Result<Self> {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - mean) / sd));
        let hyper = fit_hyper(&x, &ys, start, iterations);
        Self::fit(x, y, hyper)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    /// Posterior mean and latent standard deviation, both in standardized
    /// output units.
    pub fn predict_standardized(&self, u: &[f64]) -> (f64, f64) {
        let sf2 = self.hyper.log_signal_var.exp();
        let k = DVector::from_iterator(
            self.x.len(),
            self.x
                .iter()
                .map(|xi| sf2 * matern52(scaled_dist(xi, u, &self.inv_len))),
        );
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("Cholesky factor is nonsingular");
        let var = (sf2 - v.norm_squared()).max(1e-12);
        (mean, var.sqrt())
    }

    /// Posterior mean and standard deviation in output units.
    pub fn predict(&self, u: &[f64]) -> (f64, f64) {
        let (m, s) = self.predict_standardized(u);
        (self.y_mean + self.y_std * m, self.y_std * s)
    }

    fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Acquisition value to be minimized at `u`.
fn acquisition_value(
    gp: &GaussianProcess,
    u: &[f64],
    kind: Acquisition,
    y_best: f64,
    kappa: f64,
    xi: f64,
) -> f64 {
    let (mu, sigma) = gp.predict_standardized(u);
    match kind {
        Acquisition::Lcb => mu - kappa * sigma,
        Acquisition::Ei => {
            let imp = y_best - xi - mu;
            let z = imp / sigma;
            -(imp * normal_cdf(z) + sigma * normal_pdf(z))
        }
        Acquisition::Pi => -normal_cdf((y_best - xi - mu) / sigma),
    }
}

/// One proposed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    /// Point in search-space units.
    pub x: Vec<f64>,
    pub acquisition: Acquisition,
    /// The history carried no information (all losses equal), so the point
    /// is a random Sobol point instead of an acquisition optimum.
    pub fallback: bool,
}

const ACQ_CANDIDATES: usize = 1000;
const ACQ_LOCAL_STARTS: usize = 3;

/// Proposes the next point from a fitted surrogate.
pub fn suggest_with_gp(
    gp: &GaussianProcess,
    history_unit: &[Vec<f64>],
    y_best: f64,
    space: &SearchSpace,
    acquisition: Acquisition,
    kappa: f64,
    xi: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let dim = space.dim();
    let y_best_s = gp.standardize(y_best);
    let f = |u: &[f64]| acquisition_value(gp, u, acquisition, y_best_s, kappa, xi);

    let mut candidates: Vec<Vec<f64>> = (0..ACQ_CANDIDATES)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    if let Some(best) = history_unit
        .iter()
        .zip(&gp.x)
        .map(|(u, _)| u)
        .min_by(|a, b| f(a).total_cmp(&f(b)))
    {
        candidates.push(best.clone());
    }
    let mut scored: Vec<(f64, Vec<f64>)> = candidates.into_iter().map(|u| (f(&u), u)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let bounds = Bounds::unit(dim);
    let opts = NelderMeadOptions {
        max_evals: 150,
        rel_tol: 1e-8,
        abs_tol: 1e-12,
        initial_step: 0.05,
    };
    let mut best = scored[0].clone();
    for (_, start) in scored.iter().take(ACQ_LOCAL_STARTS) {
        let m = nelder_mead(f, start, &bounds, &opts);
        if m.value < best.0 {
            best = (m.value, m.x);
        }
    }
    // Never re-propose an evaluated point.
    let duplicate = |u: &[f64]| {
        history_unit
            .iter()
            .any(|h| h.iter().zip(u).all(|(a, b)| (a - b).abs() < 1e-9))
    };
    if duplicate(&best.1) {
        if let Some((v, u)) = scored.iter().find(|(_, u)| !duplicate(u)) {
            best = (*v, u.clone());
        }
    }
    space.from_unit(&best.1)
}

/// Fits a surrogate to `(points, losses)` and proposes the next point.
#[allow(clippy::too_many_arguments)]
pub fn gp_suggest(
    points: &[Vec<f64>],
    losses: &[f64],
    space: &SearchSpace,
    acquisition: Acquisition,
    kappa: f64,
    xi: f64,
    seed: u64,
) -> Result<Suggestion> {
    space.validate_bounds()?;
    if points.is_empty() || points.len() != losses.len() {
        return Err(Error::invalid(
            "history",
            "must be nonempty with one loss per point",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Vec<Vec<f64>> = points.iter().map(|p| space.to_unit(p)).collect();
    if losses.iter().all(|&l| l == losses[0]) {
        let skip = rng.random_range(0..1024usize) + points.len();
        let pts = sobol_points(space.dim(), skip + 1, Some(seed))?;
        return Ok(Suggestion {
            x: space.from_unit(&pts[skip]),
            acquisition,
            fallback: true,
        });
    }
    let gp = GaussianProcess::fit_ml(unit.clone(), losses, &GpHyper::initial(space.dim()), 60)?;
    let y_best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let x = suggest_with_gp(&gp, &unit, y_best, space, acquisition, kappa, xi, &mut rng);
    Ok(Suggestion {
        x,
        acquisition,
        fallback: false,
    })
}

/// Budget and acquisition settings of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub n_evals: usize,
    pub n_init: usize,
    pub kappa: f64,
    pub xi: f64,
    pub seed: u64,
    pub targets: PropertySet,
    /// Surrogate hyperparameters are re-estimated every this many evaluations.
    pub refit_every: usize,
}

impl TuneConfig {
    pub fn new(targets: PropertySet, seed: u64) -> Self {
        TuneConfig {
            n_evals: 640,
            n_init: 64,
            kappa: 1.96,
            xi: 0.01,
            seed,
            targets,
            refit_every: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.n_init >= self.n_evals {
            return Err(Error::invalid("n_init", "need 0 < n_init < n_evals"));
        }
        if self.refit_every == 0 {
            return Err(Error::invalid("refit_every", "must be >= 1"));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0 && self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::invalid("kappa/xi", "must be finite and >= 0"));
        }
        check_targets(&self.targets)
    }
}

/// One evaluated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub params: PathwayParams,
    pub measured: MeasuredProperties,
    pub loss: f64,
    /// `None` for the initial Sobol points.
    pub acquisition: Option<Acquisition>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRun {
    pub space: SearchSpace,
    pub config: TuneConfig,
    pub history: Vec<Evaluation>,
    pub best_index: usize,
    pub best_params: PathwayParams,
    pub best_loss: f64,
    pub seed: u64,
}

impl TuneRun {
    /// `(iteration, loss, best-so-far)` rows.
    pub fn convergence(&self) -> Vec<(usize, f64, f64)> {
        let mut best = f64::INFINITY;
        self.history
            .iter()
            .enumerate()
            .map(|(i, e)| {
                best = best.min(e.loss);
                (i, e.loss, best)
            })
            .collect()
    }
}

fn evaluate_point(
    space: &SearchSpace,
    config: &TuneConfig,
    x: &[f64],
    evaluate: &mut dyn FnMut(&PathwayParams) -> Result<MeasuredProperties>,
) -> Result<(PathwayParams, MeasuredProperties, f64, Option<String>)> {
    let params = space.to_params(x);
    let (measured, error) = match params.validate().and_then(|_| evaluate(&params)) {
        Ok(m) => (m, None),
        Err(e) => (MeasuredProperties::default(), Some(e.to_string())),
    };
    let l = loss(&measured, &config.targets)?;
    Ok((params, measured, l, error))
}

const LOG_LOSS_OFFSET: f64 = 1e-3;

/// The surrogate models `ln(loss + 1e-3)`: losses are nonnegative and
/// heavy-tailed (penalties reach 96), which a stationary GP on raw values
/// extrapolates to large negative predictions near the box faces.
fn surrogate_target(loss: f64) -> f64 {
    (loss + LOG_LOSS_OFFSET).ln()
}

/// Runs the optimization. `evaluate` measures the properties of the model
/// built from one parameter point; its failures are recorded with the
/// penalty loss and the run continues. `progress` sees every evaluation.
pub fn tune(
    space: &SearchSpace,
    config: &TuneConfig,
    mut evaluate: impl FnMut(&PathwayParams) -> Result<MeasuredProperties>,
    mut progress: impl FnMut(usize, &Evaluation),
) -> Result<TuneRun> {
    space.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history: Vec<Evaluation> = Vec::with_capacity(config.n_evals);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(config.n_evals);
    let mut unit: Vec<Vec<f64>> = Vec::with_capacity(config.n_evals);

    for x in sobol_init(space, config.n_init, config.seed)? {
        let (params, measured, l, error) = evaluate_point(space, config, &x, &mut evaluate)?;
        let e = Evaluation {
            params,
            measured,
            loss: l,
            acquisition: None,
            fallback: false,
            error,
        };
        progress(history.len(), &e);
        history.push(e);
        unit.push(space.to_unit(&x));
        points.push(x);
    }

    let mut hyper = GpHyper::initial(space.dim());
    let mut since_refit = config.refit_every;
    while history.len() < config.n_evals {
        let acquisition = Acquisition::ALL[rng.random_range(0..3usize)];
        let losses: Vec<f64> = history.iter().map(|e| surrogate_target(e.loss)).collect();
        let y_best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let (x, fallback) = if losses.iter().all(|&l| l == losses[0]) {
            let skip = history.len() + rng.random_range(0..1024usize);
            let pts = sobol_points(space.dim(), skip + 1, Some(config.seed))?;
            (space.from_unit(&pts[skip]), true)
        } else {
            let gp = if since_refit >= config.refit_every {
                since_refit = 0;
                let iterations = if history.len() == config.n_init {
                    80
                } else {
                    30
                };
                let gp = GaussianProcess::fit_ml(unit.clone(), &losses, &hyper, iterations)?;
                hyper = gp.hyper().clone();
                gp
            } else {
                GaussianProcess::fit(unit.clone(), &losses, hyper.clone())?
            };
            (
                suggest_with_gp(
                    &gp,
                    &unit,
                    y_best,
                    space,
                    acquisition,
                    config.kappa,
                    config.xi,
                    &mut rng,
                ),
                false,
            )
        };
        since_refit += 1;
        let (params, measured, l, error) = evaluate_point(space, config, &x, &mut evaluate)?;
        let e = Evaluation {
            params,
            measured,
            loss: l,
            acquisition: Some(acquisition),
            fallback,
            error,
        };
        progress(history.len(), &e);
        history.push(e);
        unit.push(space.to_unit(&x));
        points.push(x);
    }

    let best_index = (0..history.len())
        .min_by(|&a, &b| history[a].loss.total_cmp(&history[b].loss))
        .expect("nonempty history");
    Ok(TuneRun {
        space: space.clone(),
        config: config.clone(),
        best_params: history[best_index].params,
        best_loss: history[best_index].loss,
        best_index,
        history,
        seed: config.seed,
    })
}

/// Opponent channel whose centre unit represents a pathway in experiments.
pub fn probe_channel(class: CellClass) -> OpponentChannel {
    match class {
        CellClass::P => OpponentChannel::PRg,
        CellClass::M => OpponentChannel::MAchro,
    }
}

/// Measures the centre unit of one pathway built from `params`.
pub fn measure_pathway(
    params: &PathwayParams,
    grid: &VisualGrid,
    sweeps: &SweepConfig,
    options: KernelOptions,
) -> Result<Measurement> {
    let pathway = Pathway::new(*params, grid, options)?;
    let cell = PathwayUnit::centered(&pathway, probe_channel(params.cell_class), grid);
    measure_properties(&cell, grid, sweeps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let t = PropertySet::reference_targets(CellClass::P);
        assert_eq!(property_loss(&t, &t).unwrap(), 0.0);
        let mut m = t;
        m.suppression_index *= 2.0;
        assert!((property_loss(&m, &t).unwrap() - 1.0).abs() < 1e-12);
        let mut partial = MeasuredProperties::from(t);
        partial.saturation_index = None;
        assert_eq!(loss(&partial, &t).unwrap(), FAILED_PROPERTY_PENALTY);
        let mut bad = t;
        bad.center_radius_deg = 0.0;
        assert!(property_loss(&t, &bad).is_err());
    }

    #[test]
    fn default_spaces() {
        let p = SearchSpace::default_for(CellClass::P);
        p.validate().unwrap();
        assert_eq!(p.dims[3].lower, -0.068);
        let m = SearchSpace::default_for(CellClass::M);
        assert_eq!(m.dims[1].upper, 0.076);
        let wide = SearchSpace::with_m_center_bound(CellClass::M, MCenterBound::Wide);
        assert_eq!(wide.dims[1].upper, 0.76);
    }

    #[test]
    fn sobol_matches_reference_prefix() {
        // Unscrambled prefix of the 7-dimensional sequence.
        let expected = [
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25, 0.25, 0.75, 0.75, 0.25],
            [0.25, 0.75, 0.75, 0.75, 0.25, 0.25, 0.75],
            [0.375, 0.375, 0.625, 0.875, 0.375, 0.125, 0.375],
            [0.875, 0.875, 0.125, 0.375, 0.875, 0.625, 0.875],
            [0.625, 0.125, 0.875, 0.625, 0.625, 0.875, 0.125],
            [0.125, 0.625, 0.375, 0.125, 0.125, 0.375, 0.625],
        ];
        let pts = sobol_points(7, 8, None).unwrap();
        for (p, e) in pts.iter().zip(expected) {
            assert_eq!(p.as_slice(), e.as_slice());
        }
    }

    #[test]
    fn gp_interpolates_smooth_function() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let y: Vec<f64> = x.iter().map(|v| (6.0 * v[0]).sin()).collect();
        let gp = GaussianProcess::fit_ml(x, &y, &GpHyper::initial(1), 80).unwrap();
        for u in [0.13, 0.51, 0.77] {
            let (m, s) = gp.predict(&[u]);
            assert!((m - (6.0f64 * u).sin()).abs() < 0.05, "{u}: {m}");
            assert!(s < 0.2);
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.random(), rng.random()]).collect();
        let y = DVector::from_iterator(15, x.iter().map(|v| v[0] * 2.0 - (3.0 * v[1]).cos()));
        let h = GpHyper {
            log_lengths: vec![-0.5, 0.3],
            log_signal_var: 0.2,
            log_noise_var: -3.0,
        };
        let (_, grad) = log_marginal_likelihood(&x, &y, &h).unwrap();
        let theta = h.to_vec();
        for i in 0..theta.len() {
            let eps = 1e-6;
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += eps;
            b[i] -= eps;
            let fa = log_marginal_likelihood(&x, &y, &GpHyper::from_vec(&a))
                .unwrap()
                .0;
            let fb = log_marginal_likelihood(&x, &y, &GpHyper::from_vec(&b))
                .unwrap()
                .0;
            let fd = (fa - fb) / (2.0 * eps);
            assert!(
                (fd - grad[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
    }
}
