//! Reproduction presets: every regime over three consecutive seeds, then
//! evaluation on the test rooms and verification of the final policies.

use crate::commands::{self, EvalOutput};
use crate::config::RunConfig;
use crate::CliError;
use clap::ValueEnum;
use rayon::prelude::*;
use safenav::curriculum::{Regime, TrainingOutcome};
use safenav::envsuite::{EnvironmentSpec, TEST_ENVS};
use safenav::verifier::{builtin_properties, SuiteResult};
use std::path::{Path, PathBuf};

pub const SEEDS_PER_REGIME: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 600k steps per run, 200 evaluation episodes, verifier depth 14.
    Desk,
    /// 6M steps per run, 3 × 1000 evaluation episodes, verifier depth 20.
    Paper,
}

impl Preset {
    /// Base configuration; a config file and flags still apply on top.
    pub fn config(self, seed: u64) -> RunConfig {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        match self {
            Preset::Desk => {
                cfg.total_budget = 600_000;
                cfg.episodes = 200;
                cfg.eval_seeds = vec![seed];
                cfg.verifier.max_depth = 14;
            }
            Preset::Paper => {
                cfg.total_budget = 6_000_000;
                cfg.episodes = 1000;
                cfg.eval_seeds = vec![seed, seed + 1, seed + 2];
                cfg.verifier.max_depth = 20;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct ReproRun {
    pub regime: Regime,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: TrainingOutcome,
}

#[derive(Debug, Clone)]
pub struct ReproOutcome {
    pub config: RunConfig,
    /// Regime-major, then seed.
    pub runs: Vec<ReproRun>,
    pub eval: EvalOutput,
    pub verify: SuiteResult,
}

impl ReproOutcome {
    pub fn runs_of(&self, regime: Regime) -> impl Iterator<Item = &ReproRun> {
        self.runs.iter().filter(move |r| r.regime == regime)
    }
}

/// Output tree under `out`:
///
/// ```text
/// config.json
/// train/<regime>/seed<n>/   config.json, curve.csv, updates.csv, checkpoints, weights
/// eval/                     config.json, summary.csv, episodes.csv, gains.csv
/// verify/                   config.json, properties.json, reports.csv, table.csv
/// ```
pub fn run(cfg: &RunConfig, out: &Path) -> Result<ReproOutcome, CliError> {
    // Fail on bad inputs before hours of training.
    let envs: Vec<EnvironmentSpec> = TEST_ENVS
        .iter()
        .map(|e| commands::load_env(e, cfg))
        .collect::<Result<_, _>>()?;
    let props = builtin_properties(&cfg.sim).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.write_to(out)?;

    let jobs: Vec<(Regime, u64)> = Regime::ALL
        .iter()
        .flat_map(|&r| (0..SEEDS_PER_REGIME).map(move |k| (r, cfg.seed + k)))
        .collect();
    let runs: Vec<ReproRun> = jobs
        .par_iter()
        .map(|&(regime, seed)| {
            let run_cfg = RunConfig {
                regime,
                seed,
                ..cfg.clone()
            };
            let dir = out.join("train").join(regime.as_str()).join(format!("seed{seed}"));
            log::info!("training {regime} seed {seed} into {}", dir.display());
            let outcome = commands::train(&run_cfg, &dir, None)?;
            Ok(ReproRun {
                regime,
                seed,
                dir,
                outcome,
            })
        })
        .collect::<Result<_, CliError>>()?;

    log::info!("evaluating {} policies on {} rooms", runs.len(), envs.len());
    let models: Vec<_> = runs
        .iter()
        .map(|r| {
            let seeds = cfg.eval_seeds.iter().map(|s| s + r.seed - cfg.seed).collect();
            (r.regime.as_str().to_owned(), &r.outcome.checkpoint.policy, seeds)
        })
        .collect();
    let eval_dir = out.join("eval");
    cfg.write_to(&eval_dir)?;
    let eval = commands::evaluate(&models, &envs, cfg)?;
    commands::write_eval(&eval, &eval_dir)?;

    log::info!("verifying {} properties", props.len());
    let groups: Vec<(String, Vec<_>)> = Regime::ALL
        .iter()
        .map(|&g| {
            let nets = runs
                .iter()
                .filter(|r| r.regime == g)
                .map(|r| r.outcome.checkpoint.policy.clone())
                .collect();
            (g.as_str().to_owned(), nets)
        })
        .collect();
    let verify = commands::verify_groups(cfg, &groups, &props, &out.join("verify"))?;

    Ok(ReproOutcome {
        config: cfg.clone(),
        runs,
        eval,
        verify,
    })
}
