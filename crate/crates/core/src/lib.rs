//! Biologically constrained early-vision front-end.
//!
//! The crate models two fixed-weight front-end stages and the tooling needed
//! to parameterize them:
//!
//! - [`subcortical`]: P and M pathways built from light adaptation, a
//!   colour-opponent difference-of-Gaussians stage, divisive contrast
//!   normalization and sub-Poisson noise.
//! - [`vone`]: a Gabor filter bank with simple/complex nonlinearities and
//!   Poisson-like noise, usable on raw images (bypass) or on the subcortical
//!   output (cascade).
//! - [`neurophys`]: drifting-grating experiments, F1 extraction, response
//!   model fits and the six response properties used for tuning.
//! - [`tuner`]: Gaussian-process Bayesian optimization of pathway parameters
//!   against target response properties.
//! - [`stimuli`]: gratings and pseudo-natural images on a fixed visual grid.

pub mod error;
pub mod grid;
pub mod io;
pub mod neurophys;
pub mod optim;
pub mod stimuli;
pub mod subcortical;
pub mod tuner;
pub mod vone;

pub use error::{Error, Result};
pub use grid::{Grid, RgbImage};
pub use stimuli::{GratingSpec, VisualGrid};
