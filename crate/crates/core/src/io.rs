//! Parameter files, curve/property exports, tuning-run files and raw
//! activation dumps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::neurophys::{Experiment, ResponseCurve};
use crate::subcortical::{CellClass, PathwayParams};
use crate::tuner::TuneRun;
use crate::vone::{GaborParams, GfbSpec};

pub const PARAM_SCHEMA_VERSION: u32 = 1;

/// Flat on-disk form of [`PathwayParams`] with units in the key names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub schema_version: u32,
    pub gamma: f64,
    pub r_c_deg: f64,
    pub r_s_deg: f64,
    pub k_ratio: f64,
    pub r_cn_deg: f64,
    pub c50: f64,
    pub n_cn: f64,
    pub cell_class: CellClass,
}

impl From<&PathwayParams> for ParamFile {
    fn from(p: &PathwayParams) -> Self {
        ParamFile {
            schema_version: PARAM_SCHEMA_VERSION,
            gamma: p.gamma,
            r_c_deg: p.r_c,
            r_s_deg: p.r_s,
            k_ratio: p.k_ratio,
            r_cn_deg: p.r_cn,
            c50: p.c50,
            n_cn: p.n_cn,
            cell_class: p.cell_class,
        }
    }
}

impl ParamFile {
    /// Converts without validating the parameter invariants.
    pub fn to_params(&self) -> Result<PathwayParams> {
        if self.schema_version != PARAM_SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!(
                    "{} is not supported (expected {PARAM_SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        Ok(PathwayParams {
            gamma: self.gamma,
            r_c: self.r_c_deg,
            r_s: self.r_s_deg,
            k_ratio: self.k_ratio,
            r_cn: self.r_cn_deg,
            c50: self.c50,
            n_cn: self.n_cn,
            cell_class: self.cell_class,
        })
    }
}

pub fn params_to_json(p: &PathwayParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ParamFile::from(p))? + "\n")
}

/// Parses a parameter file; the schema is checked but the parameter
/// invariants are not (see [`PathwayParams::validate`]).
pub fn params_from_json(text: &str) -> Result<PathwayParams> {
    serde_json::from_str::<ParamFile>(text)?.to_params()
}

pub fn write_params(path: &Path, p: &PathwayParams) -> Result<()> {
    fs::write(path, params_to_json(p)?)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<PathwayParams> {
    params_from_json(&fs::read_to_string(path)?)
}

/// A filter bank with the sampling settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterBankFile {
    pub schema_version: u32,
    pub spec: GfbSpec,
    pub filters: Vec<GaborParams>,
}

pub fn filter_bank_to_json(spec: &GfbSpec, filters: &[GaborParams]) -> Result<String> {
    let file = FilterBankFile {
        schema_version: PARAM_SCHEMA_VERSION,
        spec: *spec,
        filters: filters.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn filter_bank_from_json(text: &str) -> Result<(GfbSpec, Vec<GaborParams>)> {
    let file: FilterBankFile = serde_json::from_str(text)?;
    if file.schema_version != PARAM_SCHEMA_VERSION {
        return Err(Error::invalid(
            "schema_version",
            "unsupported filter bank schema",
        ));
    }
    for f in &file.filters {
        f.validate()?;
    }
    Ok((file.spec, file.filters))
}

/// Column name of a curve's abscissa.
pub fn abscissa_column(experiment: Experiment) -> &'static str {
    match experiment {
        Experiment::SfTuning => "sf_cpd",
        Experiment::SizeTuning => "diameter_deg",
        Experiment::ContrastResponse => "contrast",
    }
}

pub fn write_curve_csv(writer: impl Write, curve: &ResponseCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([abscissa_column(curve.experiment), "f1"])?;
    for (x, y) in curve.abscissa.iter().zip(&curve.f1) {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(reader: impl Read, experiment: Experiment) -> Result<ResponseCurve> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.len() != 2 || &headers[0] != abscissa_column(experiment) || &headers[1] != "f1" {
        return Err(Error::Shape(format!(
            "expected columns [{}, f1], found {:?}",
            abscissa_column(experiment),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut abscissa = Vec::new();
    let mut f1 = Vec::new();
    for record in r.records() {
        let record = record?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Shape(format!("bad number {s:?}: {e}")))
        };
        abscissa.push(parse(&record[0])?);
        f1.push(parse(&record[1])?);
    }
    ResponseCurve::new(abscissa, f1, experiment)
}

pub fn curve_csv_string(curve: &ResponseCurve) -> Result<String> {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, curve)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_tune_run(path: &Path, run: &TuneRun) -> Result<()> {
    fs::write(path, to_json_pretty(run)?)?;
    Ok(())
}

pub fn read_tune_run(path: &Path) -> Result<TuneRun> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `iteration,loss,best_so_far` rows of a run.
pub fn convergence_csv(run: &TuneRun) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loss", "best_so_far"])?;
    for (i, l, b) in run.convergence() {
        w.write_record([i.to_string(), l.to_string(), b.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Header written next to a raw activation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub schema_version: u32,
    /// Always `"f64le"`: little-endian IEEE-754 doubles, channel-major then
    /// row-major.
    pub dtype: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mode: String,
    pub seed: Option<u64>,
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_dump(
    dir: &Path,
    stem: &str,
    grids: &[Grid],
    mode: &str,
    seed: Option<u64>,
) -> Result<DumpHeader> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Shape("nothing to dump".into()))?;
    if grids.iter().any(|g| !g.same_shape(first)) {
        return Err(Error::Shape("dumped channels differ in shape".into()));
    }
    let header = DumpHeader {
        schema_version: PARAM_SCHEMA_VERSION,
        dtype: "f64le".into(),
        channels: grids.len(),
        height: first.height(),
        width: first.width(),
        mode: mode.into(),
        seed,
    };
    let mut bytes = Vec::with_capacity(grids.len() * first.len() * 8);
    for g in grids {
        for v in g.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(dir.join(format!("{stem}.json")), to_json_pretty(&header)?)?;
    Ok(header)
}

pub fn read_dump(dir: &Path, stem: &str) -> Result<(DumpHeader, Vec<Grid>)> {
    let header: DumpHeader =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let per = header.height * header.width;
    if header.dtype != "f64le" || bytes.len() != header.channels * per * 8 {
        return Err(Error::Shape("dump size does not match its header".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let grids = values
        .chunks_exact(per.max(1))
        .map(|c| Grid::from_vec(header.height, header.width, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, grids))
}
