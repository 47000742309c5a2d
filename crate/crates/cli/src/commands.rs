use std::fs;
use std::path::{Path, PathBuf};

use earlyvision::io;
use earlyvision::neurophys::{Measurement, ResponseCurve};
use earlyvision::subcortical::{CellClass, PathwayParams, SubcorticalBlock, SPIKES_MEAN_TARGET};
use earlyvision::tuner::{measure_pathway, tune, SearchSpace};
use earlyvision::vone::{calibrated_block, sample_gfb, GfbSpec, VOneBlock, VOneMode};
use earlyvision::{stimuli, Grid, RgbImage, VisualGrid};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;
use crate::Mode;

/// Settings shared by every command after flags and config are merged.
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub mode: Mode,
    pub cell: Option<CellClass>,
    pub dry_run: bool,
    pub plots: bool,
}

impl Context {
    fn classes(&self) -> Vec<CellClass> {
        match self.cell {
            Some(c) => vec![c],
            None => vec![CellClass::P, CellClass::M],
        }
    }

    fn subcortical(&self) -> Result<SubcorticalBlock, CliError> {
        Ok(SubcorticalBlock::with_options(
            self.config.params(CellClass::P)?,
            self.config.params(CellClass::M)?,
            self.config.grid()?,
            self.config.kernel_options(),
        )?)
    }

    fn create_dir(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Write(dir.to_path_buf(), e))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Write(path.to_path_buf(), e))
}

pub fn tune_cmd(ctx: &Context) -> Result<(), CliError> {
    let grid = ctx.config.grid()?;
    let sweeps = ctx.config.sweeps();
    let options = ctx.config.kernel_options();
    let plans: Vec<(CellClass, SearchSpace)> = ctx
        .classes()
        .into_iter()
        .map(|c| (c, ctx.config.space(c)))
        .collect();
    for (class, space) in &plans {
        space.validate()?;
        ctx.config.tune_config(*class, ctx.seed).validate()?;
    }
    if ctx.dry_run {
        for (class, space) in &plans {
            let cfg = ctx.config.tune_config(*class, ctx.seed);
            println!(
                "tune {class}: {} evaluations ({} initial), seed {}, {} dimensions -> {}",
                cfg.n_evals,
                cfg.n_init,
                cfg.seed,
                space.dim(),
                ctx.out.join(format!("tune-{class}")).display()
            );
        }
        return Ok(());
    }

    for (class, space) in &plans {
        let config = ctx.config.tune_config(*class, ctx.seed);
        let run = tune(
            space,
            &config,
            |p: &PathwayParams| Ok(measure_pathway(p, &grid, &sweeps, options)?.properties),
            |i, e| {
                if (i + 1) % 16 == 0 || i + 1 == config.n_evals {
                    eprintln!(
                        "tune {class}: {}/{} loss {:.4}",
                        i + 1,
                        config.n_evals,
                        e.loss
                    );
                }
            },
        )?;
        let dir = ctx.out.join(format!("tune-{class}"));
        ctx.create_dir(&dir)?;
        write(&dir.join("tune_run.json"), io::to_json_pretty(&run)?)?;
        write(&dir.join("convergence.csv"), io::convergence_csv(&run)?)?;
        write(
            &dir.join("params.json"),
            io::params_to_json(&run.best_params)?,
        )?;
        let best = &run.history[run.best_index];
        write(
            &dir.join("properties.json"),
            io::to_json_pretty(&best.measured)?,
        )?;
        println!(
            "tune {class}: best loss {:.6} at evaluation {}",
            run.best_loss, run.best_index
        );
    }
    Ok(())
}

fn measure_dirs(ctx: &Context) -> Vec<(String, Option<CellClass>)> {
    match ctx.mode {
        Mode::Subcortical => ctx
            .classes()
            .into_iter()
            .map(|c| (format!("measure-subcortical-{c}"), Some(c)))
            .collect(),
        Mode::Bypass => vec![("measure-bypass".into(), None)],
        Mode::Cascade => vec![("measure-cascade".into(), None)],
    }
}

pub fn measure_cmd(ctx: &Context) -> Result<(), CliError> {
    let grid = ctx.config.grid()?;
    let sweeps = ctx.config.sweeps();
    let dirs = measure_dirs(ctx);
    if ctx.dry_run {
        for (name, _) in &dirs {
            println!("measure: {}", ctx.out.join(name).display());
        }
        return Ok(());
    }
    for (name, class) in dirs {
        let measurement = match class {
            Some(class) => measure_pathway(
                &ctx.config.params(class)?,
                &grid,
                &sweeps,
                ctx.config.kernel_options(),
            )?,
            None => {
                let block = probe_block(ctx)?;
                earlyvision::neurophys::measure_properties(&block.cell(0), &grid, &sweeps)?
            }
        };
        let dir = ctx.out.join(&name);
        ctx.create_dir(&dir)?;
        write_measurement(&dir, &measurement, ctx.plots)?;
        println!("{name}: {}", summary(&measurement));
    }
    Ok(())
}

fn probe_block(ctx: &Context) -> Result<VOneBlock, CliError> {
    let mode = match ctx.mode {
        Mode::Bypass => VOneMode::Bypass,
        _ => VOneMode::Cascade,
    };
    Ok(VOneBlock::new(
        vec![ctx.config.probe_filter()],
        mode,
        ctx.subcortical()?,
    )?)
}

fn write_measurement(dir: &Path, m: &Measurement, plots: bool) -> Result<(), CliError> {
    write(
        &dir.join("properties.json"),
        io::to_json_pretty(&m.properties)?,
    )?;
    let fits = serde_json::json!({
        "sf_fit": m.sf_fit,
        "area_fit": m.area_fit,
        "contrast_fit": m.contrast_fit,
        "peak_sf_cpd": m.peak_sf_cpd,
        "peak_diameter_deg": m.peak_diameter_deg,
    });
    write(
        &dir.join("fits.json"),
        serde_json::to_string_pretty(&fits).expect("plain values") + "\n",
    )?;
    for (file, curve) in curve_files(m) {
        write(
            &dir.join(format!("{file}.csv")),
            io::curve_csv_string(curve)?,
        )?;
        if plots {
            write(&dir.join(format!("{file}.svg")), plot::curve_svg(curve))?;
        }
    }
    Ok(())
}

fn curve_files(m: &Measurement) -> [(&'static str, &ResponseCurve); 3] {
    [
        ("sf_tuning", &m.sf_curve),
        ("size_tuning", &m.size_curve),
        ("contrast_response", &m.contrast_curve),
    ]
}

fn summary(m: &Measurement) -> String {
    let p = &m.properties;
    let show = |v: Option<f64>| v.map_or("failed".to_string(), |v| format!("{v:.4}"));
    let mut s = format!(
        "r_c {} r_s {} r_e {} r_i {} SI {} saturation {}",
        show(p.center_radius_deg),
        show(p.surround_radius_deg),
        show(p.excitation_radius_deg),
        show(p.inhibition_radius_deg),
        show(p.suppression_index),
        show(p.saturation_index)
    );
    for (k, e) in &p.errors {
        s.push_str(&format!("\n  {k}: {e}"));
    }
    s
}

/// Decodes an 8- or 16-bit PNG into `[0, 1]` planes.
pub fn read_png(path: &Path, grid: &VisualGrid) -> Result<RgbImage, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Image(path.to_path_buf(), e))?
        .to_rgb16();
    let n = grid.resolution_px;
    if img.width() as usize != n || img.height() as usize != n {
        return Err(CliError::Invalid(format!(
            "{} is {}x{}, the grid is {n}x{n}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let plane = |ch: usize| {
        Grid::from_fn(n, n, |r, c| {
            // 8-bit sources are widened by 257, so v/65535 equals v8/255.
            img.get_pixel(c as u32, r as u32)[ch] as f64 / 65535.0
        })
    };
    Ok(RgbImage::new(plane(0), plane(1), plane(2))?)
}

pub fn forward_cmd(ctx: &Context, image: &Path) -> Result<(), CliError> {
    let grid = ctx.config.grid()?;
    let frame = read_png(image, &grid)?;
    let stem = format!("forward-{}", ctx.mode.name());
    if ctx.dry_run {
        println!(
            "forward: {} -> {}",
            image.display(),
            ctx.out.join(&stem).display()
        );
        return Ok(());
    }
    let noise = ctx.config.noise.enabled;
    let seed = noise.then_some(ctx.seed);
    let mut sub = ctx.subcortical()?;
    let batch = stimuli::render_natural_batch(ctx.seed, 4, &grid)?;
    ctx.create_dir(&ctx.out)?;
    let grids = match ctx.mode {
        Mode::Subcortical => {
            sub.calibrate(&batch, SPIKES_MEAN_TARGET)?;
            let spec = ctx.config.subcortical_noise();
            sub.forward(&frame, seed.map(|s| (&spec, s)))?
        }
        Mode::Bypass | Mode::Cascade => {
            let spec = GfbSpec {
                n_channels: ctx.config.vone.n_channels,
                seed: ctx.config.vone.bank_seed,
                grid,
                ..GfbSpec::default()
            };
            let filters = sample_gfb(&spec)?;
            write(
                &ctx.out.join(format!("{stem}-filters.json")),
                io::filter_bank_to_json(&spec, &filters)?,
            )?;
            let mode = if ctx.mode == Mode::Bypass {
                VOneMode::Bypass
            } else {
                VOneMode::Cascade
            };
            sub.calibrate(&batch, SPIKES_MEAN_TARGET)?;
            let mut block = calibrated_block(filters, mode, sub, ctx.seed)?;
            block.set_subcortical_noise(ctx.config.subcortical_noise())?;
            block.forward(&frame, seed)?
        }
    };
    let header = io::write_dump(&ctx.out, &stem, &grids, ctx.mode.name(), seed)?;
    println!(
        "forward: {} channels of {}x{} -> {}",
        header.channels,
        header.height,
        header.width,
        ctx.out.join(format!("{stem}.bin")).display()
    );
    Ok(())
}

/// Outcome of checking one parameter file.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn validate_params(
    path: &Path,
    space: Option<&SearchSpace>,
) -> Result<ValidationReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))?;
    let params = io::params_from_json(&text)?;
    let mut report = ValidationReport::default();
    if let Err(e) = params.validate() {
        report.failures.push(e.to_string());
    }
    if let Some(space) = space {
        if space.cell_class == params.cell_class {
            report.warnings = space.violations(&params);
        } else {
            report.warnings.push(format!(
                "search space is for {} cells, file holds {} parameters",
                space.cell_class, params.cell_class
            ));
        }
    }
    Ok(report)
}

pub fn validate_cmd(ctx: &Context, path: &Path, check_box: bool) -> Result<bool, CliError> {
    let class = match ctx.cell {
        Some(c) => c,
        None => {
            let text =
                fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))?;
            io::params_from_json(&text)?.cell_class
        }
    };
    let space = (check_box || ctx.config.space.is_some()).then(|| ctx.config.space(class));
    let report = validate_params(path, space.as_ref())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for f in &report.failures {
        eprintln!("invalid: {f}");
    }
    if report.failures.is_empty() {
        println!("{}: ok", path.display());
    }
    Ok(report.failures.is_empty())
}
