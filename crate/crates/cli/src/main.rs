mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use earlyvision::subcortical::CellClass;

use crate::commands::Context;
use crate::config::{RunConfig, OUT_DIR_ENV};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Subcortical pathways only.
    Subcortical,
    /// Gabor filter bank on the raw image.
    Bypass,
    /// Subcortical block feeding the Gabor filter bank.
    Cascade,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Subcortical => "subcortical",
            Mode::Bypass => "bypass",
            Mode::Cascade => "cascade",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "earlyvision",
    version,
    about = "Early-vision front-end: tuning, measurement and forward passes"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (also settable through EARLYVISION_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Mode::Subcortical)]
    mode: Mode,
    /// Restricts the command to one pathway.
    #[arg(long, global = true, value_parser = parse_cell)]
    cell: Option<CellClass>,
    /// Validates inputs and prints the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Also writes SVG plots of the response curves.
    #[arg(long, global = true)]
    plots: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fits pathway parameters to target response properties.
    Tune,
    /// Measures SF, size and contrast tuning of a probe cell.
    Measure,
    /// Runs one PNG through the front-end and dumps the activations.
    Forward { image: PathBuf },
    /// Checks a parameter file.
    Validate {
        params: PathBuf,
        /// Warns about values outside the default search box.
        #[arg(long)]
        check_box: bool,
    },
}

fn parse_cell(s: &str) -> Result<CellClass, String> {
    s.parse::<CellClass>().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let out = cli
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
        out,
        mode: cli.mode,
        cell: cli.cell,
        dry_run: cli.dry_run,
        plots: cli.plots,
    };
    match &cli.command {
        Command::Tune => commands::tune_cmd(&ctx).map(|_| true),
        Command::Measure => commands::measure_cmd(&ctx).map(|_| true),
        Command::Forward { image } => commands::forward_cmd(&ctx, image).map(|_| true),
        Command::Validate { params, check_box } => commands::validate_cmd(&ctx, params, *check_box),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
