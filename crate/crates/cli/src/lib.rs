//! Command-line front end: environment inspection, training, evaluation,
//! verification and reproduction presets.

pub mod commands;
pub mod config;
pub mod repro;

use clap::{Args, Parser, Subcommand, ValueEnum};
use safenav::curriculum::Regime;
use safenav::verifier::BoundMode;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, environment, weight or property files.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "safenav", version, about = "Train, evaluate and verify lidar navigation policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect, validate or measure environment files or bundled names.
    Env {
        action: EnvAction,
        #[arg(required = true)]
        targets: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one curriculum regime.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Greedy rollouts of policy weight files on test environments.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// `[label=]path`; labels naming a regime enable the gain table.
        #[arg(long, num_args = 1.., required = true)]
        weights: Vec<String>,
        /// Comma-separated environment names or files.
        #[arg(long, value_delimiter = ',', default_values_t = safenav::envsuite::TEST_ENVS.map(String::from))]
        envs: Vec<String>,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Estimate property violation rates of policy weight files.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// `[group=]path`; files sharing a group are averaged.
        #[arg(long, num_args = 1.., required = true)]
        weights: Vec<String>,
        /// JSON property file; defaults to the built-in suite.
        #[arg(long)]
        properties: Option<PathBuf>,
    },
    /// Train all regimes over three seeds, evaluate and verify.
    Repro {
        preset: repro::Preset,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvAction {
    Inspect,
    Validate,
    Metrics,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub mode: Option<BoundMode>,
    /// Evaluation episodes per seed and environment.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Verifier bisection depth cap.
    #[arg(long)]
    pub budget_depth: Option<u32>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Directory searched for `<name>.json` environments.
    #[arg(long = "env-dir")]
    pub env_dirs: Vec<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            regime: self.regime,
            mode: self.mode,
            episodes: self.episodes,
            budget_depth: self.budget_depth,
            threads: self.threads,
            eval_seeds: None,
        }
    }

    fn resolve(&self, base: RunConfig, extra: impl FnOnce(&mut Overrides)) -> Result<RunConfig, CliError> {
        let mut flags = self.overrides();
        extra(&mut flags);
        let mut cfg = RunConfig::resolve_from(base, self.config.as_deref(), &flags)?;
        cfg.env_dirs.extend(self.env_dirs.iter().cloned());
        Ok(cfg)
    }
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Env {
            action,
            targets,
            common,
        } => {
            let cfg = common.resolve(RunConfig::default(), |_| ())?;
            let text = commands::env_report(action, &targets, &cfg)?;
            print!("{text}");
            Ok(())
        }
        Command::Train { common, resume, steps } => {
            let mut cfg = common.resolve(RunConfig::default(), |_| ())?;
            if let Some(s) = steps {
                cfg.total_budget = s;
                cfg.validate()?;
            }
            with_threads(cfg.threads, || commands::train(&cfg, &common.out, resume.as_deref()))?;
            Ok(())
        }
        Command::Eval {
            common,
            weights,
            envs,
            seeds,
        } => {
            let cfg = common.resolve(RunConfig::default(), |f| f.eval_seeds = seeds)?;
            let weights = commands::parse_weight_args(&weights)?;
            with_threads(cfg.threads, || commands::eval(&cfg, &weights, &envs, &common.out))?;
            Ok(())
        }
        Command::Verify {
            common,
            weights,
            properties,
        } => {
            let cfg = common.resolve(RunConfig::default(), |_| ())?;
            let weights = commands::parse_weight_args(&weights)?;
            with_threads(cfg.threads, || {
                commands::verify(&cfg, &weights, properties.as_deref(), &common.out)
            })?;
            Ok(())
        }
        Command::Repro { preset, common } => {
            let base = preset.config(common.seed.unwrap_or(0));
            let cfg = common.resolve(base, |_| ())?;
            if preset == repro::Preset::Paper {
                log::warn!("paper preset: 9 runs of {} steps; expect days of compute", cfg.total_budget);
            }
            with_threads(cfg.threads, || repro::run(&cfg, &common.out))?;
            Ok(())
        }
    }
}

/// Runs `f` on a pool capped at `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(
    threads: usize,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(f)
}
