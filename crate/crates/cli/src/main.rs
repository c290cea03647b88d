mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use geopose::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "geopose",
    version,
    about = "Template-matching 6D object pose estimation from depth and instance masks"
)]
struct Cli {
    #[command(flatten)]
    tuning: Tuning,
    #[command(subcommand)]
    command: Command,
}

/// Tunables shared by every subcommand. Flags override `--config`.
#[derive(Args, Debug, Clone)]
pub struct Tuning {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Viewpoint spacing in degrees.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// In-plane rotation step in degrees.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Projected descriptor dimension.
    #[arg(long, global = true)]
    pub pca: Option<usize>,
    /// Weight of match coverage in the template score.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Templates kept for pose hypotheses.
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    /// RANSAC iterations per template.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Use geometry-derived descriptors even when descriptor grids are given.
    #[arg(long, global = true)]
    pub oracle: bool,
    /// Project descriptors without subtracting their mean.
    #[arg(long = "strict-eq2", global = true)]
    pub strict_eq2: bool,
    /// Soft limit on onboarding wall-clock time, seconds.
    #[arg(long = "time-budget", global = true, default_value_t = 300.0)]
    pub time_budget: f64,
}

impl Tuning {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.pca {
            cfg.pca_dim = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.topk {
            cfg.top_k = v;
        }
        if let Some(v) = self.iters {
            cfg.ransac_iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.strict_eq2 {
            cfg.strict_eq2 = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render templates of a mesh and write a template database.
    Onboard(commands::OnboardArgs),
    /// Estimate poses for every instance of one scene directory.
    Estimate(commands::EstimateArgs),
    /// Write a synthetic single-object dataset.
    Synth(commands::SynthArgs),
    /// Score a result file against a scene's ground truth.
    Eval(commands::EvalArgs),
}

fn run(cli: &Cli) -> Result<commands::Outcome> {
    let cfg = cli.tuning.resolve()?;
    rayon::ThreadPoolBuilder::new().num_threads(cli.tuning.jobs).build_global().context("starting thread pool")?;
    match &cli.command {
        Command::Onboard(a) => commands::onboard(&cfg, &cli.tuning, a),
        Command::Estimate(a) => commands::estimate(&cfg, &cli.tuning, a),
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(commands::Outcome::Clean) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Degraded) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
