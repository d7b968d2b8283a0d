//! `plenocal`: simulate, rectify, calibrate and evaluate from the shell.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "plenocal", version, about = "Focused plenoptic camera calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Pixel noise standard deviation.
    #[arg(long, global = true, value_name = "F")]
    sigma: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    poses: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Optimize the distortion centers instead of anchoring them.
    #[arg(long, global = true)]
    optimize_distortion_centers: bool,
    /// Plane separation `f'` of the decode setting.
    #[arg(long, global = true, value_name = "F")]
    fixed_fprime: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate board observations with a ground-truth sidecar.
    Simulate {
        /// Also render a white image.
        #[arg(long)]
        white_image: bool,
    },
    /// Fit the rectifying homography and apply it to observations.
    Rectify {
        /// White image (.pgm) or micro-image centers (.json).
        centers: PathBuf,
        observations: PathBuf,
    },
    /// Calibrate from an observation file.
    Calibrate { observations: PathBuf },
    /// Compare a calibration report with simulation ground truth.
    Evaluate { result: PathBuf, ground_truth: PathBuf },
}

impl Cli {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(self.config.as_deref()).map_err(Failure::config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.poses {
            cfg.poses = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if self.optimize_distortion_centers {
            cfg.center_policy = plenocal::calibration::CenterPolicy::Free;
        }
        if let Some(v) = self.fixed_fprime {
            cfg.fixed_fprime = Some(v);
        }
        match &self.command {
            Command::Simulate { white_image } => cfg.white_image |= white_image,
            Command::Rectify { centers, observations } => cfg.inputs = vec![centers.clone(), observations.clone()],
            Command::Calibrate { observations } => cfg.inputs = vec![observations.clone()],
            Command::Evaluate { result, ground_truth } => cfg.inputs = vec![result.clone(), ground_truth.clone()],
        }
        cfg.validate().map_err(Failure::config)?;
        Ok(cfg)
    }

    fn run(&self) -> Result<(), Failure> {
        let cfg = self.resolve()?;
        match self.command {
            Command::Simulate { .. } => commands::simulate(&cfg),
            Command::Rectify { .. } => commands::rectify(&cfg),
            Command::Calibrate { .. } => commands::calibrate(&cfg),
            Command::Evaluate { .. } => commands::evaluate(&cfg),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match plenocal::parallel::install(|| cli.run()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
