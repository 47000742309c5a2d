//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use earlyvision::neurophys::{PropertySet, SweepConfig};
use earlyvision::subcortical::{
    CellClass, KRatioConvention, KernelOptions, NoiseSpec, PathwayParams, KERNEL_COVERAGE,
};
use earlyvision::tuner::{Dimension, MCenterBound, SearchSpace, TuneConfig};
use earlyvision::vone::{CellType, GaborParams};
use earlyvision::{io, VisualGrid};

use crate::error::CliError;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "EARLYVISION_OUT";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub pathway: PathwaySection,
    #[serde(default)]
    pub noise: NoiseSection,
    pub sweeps: Option<SweepConfig>,
    #[serde(default)]
    pub tune: TuneSection,
    pub space: Option<SpaceSection>,
    #[serde(default)]
    pub vone: VOneSection,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub fov_deg: f64,
    pub resolution_px: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = VisualGrid::default();
        GridSection {
            fov_deg: g.fov_deg,
            resolution_px: g.resolution_px,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathwaySection {
    /// Parameter files; the built-in tuned parameters are used when absent.
    pub p_params_file: Option<PathBuf>,
    pub m_params_file: Option<PathBuf>,
    #[serde(default)]
    pub k_convention: KRatioConvention,
    #[serde(default = "default_coverage")]
    pub kernel_coverage: f64,
}

fn default_coverage() -> f64 {
    KERNEL_COVERAGE
}

impl Default for PathwaySection {
    fn default() -> Self {
        PathwaySection {
            p_params_file: None,
            m_params_file: None,
            k_convention: KRatioConvention::default(),
            kernel_coverage: KERNEL_COVERAGE,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_sub_fano")]
    pub subcortical_fano: f64,
}

fn default_sub_fano() -> f64 {
    NoiseSpec::subcortical().fano
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            enabled: false,
            subcortical_fano: default_sub_fano(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    #[serde(default = "default_n_evals")]
    pub n_evals: usize,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_refit")]
    pub refit_every: usize,
    /// Explicit targets; the reference LGN means of the cell class otherwise.
    pub targets: Option<PropertySet>,
}

fn default_n_evals() -> usize {
    640
}
fn default_n_init() -> usize {
    64
}
fn default_kappa() -> f64 {
    1.96
}
fn default_xi() -> f64 {
    0.01
}
fn default_refit() -> usize {
    16
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            n_evals: default_n_evals(),
            n_init: default_n_init(),
            kappa: default_kappa(),
            xi: default_xi(),
            refit_every: default_refit(),
            targets: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default)]
    pub m_center_bound: MCenterBound,
    /// Replaces the default box entirely when given.
    pub dims: Option<Vec<Dimension>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VOneSection {
    /// Probe filter measured by `measure` in bypass and cascade modes.
    #[serde(default = "default_probe_sf")]
    pub probe_sf_cpd: f64,
    #[serde(default = "default_probe_channel")]
    pub probe_input_channel: usize,
    #[serde(default = "default_probe_type")]
    pub probe_cell_type: CellType,
    #[serde(default)]
    pub probe_orientation_rad: f64,
    /// Filter bank used by `forward`.
    #[serde(default = "default_channels")]
    pub n_channels: usize,
    #[serde(default)]
    pub bank_seed: u64,
}

fn default_probe_sf() -> f64 {
    4.0
}
fn default_probe_channel() -> usize {
    3
}
fn default_probe_type() -> CellType {
    CellType::Simple
}
fn default_channels() -> usize {
    earlyvision::vone::HARNESS_CHANNELS
}

impl Default for VOneSection {
    fn default() -> Self {
        VOneSection {
            probe_sf_cpd: default_probe_sf(),
            probe_input_channel: default_probe_channel(),
            probe_cell_type: default_probe_type(),
            probe_orientation_rad: 0.0,
            n_channels: default_channels(),
            bank_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(path.to_path_buf(), e))?;
        config.base_dir(path).validate()
    }

    /// Resolves relative parameter-file paths against the config's directory.
    fn base_dir(mut self, path: &Path) -> Self {
        let dir = path.parent().unwrap_or(Path::new("."));
        for f in [
            &mut self.pathway.p_params_file,
            &mut self.pathway.m_params_file,
        ] {
            if let Some(p) = f {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        self
    }

    pub fn validate(self) -> Result<Self, CliError> {
        self.grid()?;
        if !(self.pathway.kernel_coverage > 0.0 && self.pathway.kernel_coverage < 1.0) {
            return Err(CliError::Invalid(
                "pathway.kernel_coverage must lie in (0, 1)".into(),
            ));
        }
        if !(self.noise.subcortical_fano >= 0.0) {
            return Err(CliError::Invalid(
                "noise.subcortical_fano must be >= 0".into(),
            ));
        }
        self.probe_filter().validate()?;
        if let Some(space) = &self.space {
            if let Some(dims) = &space.dims {
                let s = SearchSpace {
                    dims: dims.clone(),
                    cell_class: CellClass::P,
                };
                s.validate()?;
            }
        }
        Ok(self)
    }

    pub fn grid(&self) -> Result<VisualGrid, CliError> {
        Ok(VisualGrid::new(self.grid.fov_deg, self.grid.resolution_px)?)
    }

    pub fn kernel_options(&self) -> KernelOptions {
        KernelOptions {
            coverage: self.pathway.kernel_coverage,
            k_convention: self.pathway.k_convention,
        }
    }

    pub fn sweeps(&self) -> SweepConfig {
        self.sweeps.clone().unwrap_or_default()
    }

    pub fn params(&self, class: CellClass) -> Result<PathwayParams, CliError> {
        let file = match class {
            CellClass::P => &self.pathway.p_params_file,
            CellClass::M => &self.pathway.m_params_file,
        };
        let params = match file {
            Some(path) => io::read_params(path)?,
            None => match class {
                CellClass::P => PathwayParams::tuned_p(),
                CellClass::M => PathwayParams::tuned_m(),
            },
        };
        if params.cell_class != class {
            return Err(CliError::Invalid(format!(
                "parameter file for {class} holds {} parameters",
                params.cell_class
            )));
        }
        params.validate()?;
        Ok(params)
    }

    pub fn space(&self, class: CellClass) -> SearchSpace {
        match &self.space {
            Some(SpaceSection {
                dims: Some(dims), ..
            }) => SearchSpace {
                dims: dims.clone(),
                cell_class: class,
            },
            Some(s) => SearchSpace::with_m_center_bound(class, s.m_center_bound),
            None => SearchSpace::default_for(class),
        }
    }

    pub fn tune_config(&self, class: CellClass, seed: u64) -> TuneConfig {
        let t = &self.tune;
        TuneConfig {
            n_evals: t.n_evals,
            n_init: t.n_init,
            kappa: t.kappa,
            xi: t.xi,
            seed,
            targets: t
                .targets
                .unwrap_or_else(|| PropertySet::reference_targets(class)),
            refit_every: t.refit_every,
        }
    }

    pub fn probe_filter(&self) -> GaborParams {
        let v = &self.vone;
        GaborParams {
            orientation_rad: v.probe_orientation_rad,
            ..GaborParams::probe(v.probe_sf_cpd, v.probe_input_channel, v.probe_cell_type)
        }
    }

    pub fn subcortical_noise(&self) -> NoiseSpec {
        NoiseSpec {
            fano: self.noise.subcortical_fano,
            ..NoiseSpec::subcortical()
        }
    }
}
