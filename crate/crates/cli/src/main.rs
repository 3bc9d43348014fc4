//! `nsb`: simulate, analyze and report on the neutron singlet-pair experiment.

mod commands;
mod grid;
mod inequality;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nsb_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nsb", version, about = "Neutron singlet-pair Bell experiment simulator and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-form P12 predictions on an angle grid.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Degrees, `start:stop:step` or a comma list.
        #[arg(long, default_value = "0:180:5")]
        theta_grid: String,
        /// CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the event simulation at one analyzer angle and write event files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Stage angle in degrees, 0 to 360.
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 0)]
        rep: u32,
        /// Detector-1 and detector-2 event files.
        #[arg(long, num_args = 2, value_names = ["D1", "D2"])]
        out: Vec<PathBuf>,
    },
    /// Histogram, ratio estimate and model fit from two event files.
    Analyze {
        #[arg(long)]
        d1: PathBuf,
        #[arg(long)]
        d2: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the angle recorded in the event file.
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        no_fit: bool,
    },
    /// Simulate and analyze every configured angle, then build the scan report.
    Scan {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config, then the current directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        no_fit: bool,
    },
    /// CH and CHSH evaluation of a model or a scan CSV.
    Inequality {
        /// `model:ideal|all_pairs_perfect|paper|projector|factorizable` or a scan CSV path.
        #[arg(long)]
        source: String,
        /// Supplies transmittances and CH settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0:90:0.5")]
        phi_grid: String,
        /// Geometry parameter of the headline evaluation, degrees.
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        p1: Option<f64>,
        #[arg(long)]
        p2: Option<f64>,
        /// JSON destination for the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("NSB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidParameter {
                name: "NSB_THREADS",
                reason: format!("`{v}` is not a positive integer"),
            }),
        },
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Predict { config, theta_grid, out } => {
            let cfg = config.as_deref().map(commands::load_config).transpose()?;
            commands::predict(cfg.as_ref(), &grid::parse_grid(&theta_grid)?, out.as_deref())
        }
        Cmd::Simulate { config, theta, rep, out } => {
            let cfg = commands::load_config(&config)?;
            commands::simulate(&cfg, theta, rep, &out[0], &out[1])
        }
        Cmd::Analyze { d1, d2, config, out_dir, theta, no_fit } => {
            let cfg = commands::load_config(&config)?;
            commands::analyze(&cfg, &d1, &d2, &out_dir, theta, !no_fit)
        }
        Cmd::Scan { config, out_dir, no_fit } => {
            let cfg = commands::load_config(&config)?;
            let dir = out_dir
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            commands::scan(&cfg, &dir, threads_from_env()?, !no_fit)
        }
        Cmd::Inequality { source, config, phi_grid, phi, p1, p2, out } => {
            let cfg = config.as_deref().map(commands::load_config).transpose()?;
            commands::inequality(&source, cfg.as_ref(), &grid::parse_grid(&phi_grid)?, phi, p1, p2, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
