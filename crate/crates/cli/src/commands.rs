//! Subcommand bodies. Each returns its results as values so the repro
//! driver and tests can use them without re-reading files.

use crate::config::RunConfig;
use crate::{CliError, EnvAction};
use rayon::prelude::*;
use safenav::curriculum::{run_training, Checkpoint, CurriculumError, Regime, TrainOptions, TrainingOutcome};
use safenav::envsuite::{self, EnvError, EnvironmentSpec};
use safenav::eval::{self, gain_table, EpisodeRecord, EvalError, EvalSummary, GainTable};
use safenav::neural::{Head, MlpNetwork, HIDDEN_LAYERS, HIDDEN_WIDTH};
use safenav::sim::OBS_DIM;
use safenav::verifier::{builtin_properties, load_properties, save_properties, verify_suite, SafetyProperty, SuiteResult, VerifierError};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub(crate) fn env_error(e: EnvError) -> CliError {
    match e {
        EnvError::Unsatisfiable { .. } => CliError::Runtime(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn curriculum_error(e: CurriculumError) -> CliError {
    match e {
        CurriculumError::InvalidPlan(_)
        | CurriculumError::MissingEnvironment { .. }
        | CurriculumError::CheckpointMismatch(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn eval_error(e: EvalError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn verifier_error(e: VerifierError) -> CliError {
    match e {
        VerifierError::Io { .. }
        | VerifierError::Parse(_)
        | VerifierError::InvalidProperty { .. }
        | VerifierError::InvalidBox(_)
        | VerifierError::Shape { .. } => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

/// A file path, or a bundled / `env_dirs` environment name.
pub fn load_env(target: &str, cfg: &RunConfig) -> Result<EnvironmentSpec, CliError> {
    let path = Path::new(target);
    if path.is_file() {
        envsuite::load_environment(path).map_err(env_error)
    } else {
        envsuite::resolve(target, &cfg.env_dirs).map_err(env_error)
    }
}

/// Text printed by `env <action>`; an invalid spec is an error.
pub fn env_report(action: EnvAction, targets: &[String], cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = String::new();
    if action == EnvAction::Metrics {
        out.push_str("name,occupied_area,min_obstacle_gap\n");
    }
    for target in targets {
        let spec = load_env(target, cfg)?;
        let radius = cfg.sim.robot_radius;
        let clearance = spec.validate_clearance(radius);
        let d = spec.difficulty;
        match action {
            EnvAction::Metrics => {
                writeln!(out, "{},{},{}", spec.name, d.occupied_area, d.min_obstacle_gap).unwrap();
            }
            EnvAction::Validate => {
                clearance.map_err(env_error)?;
                writeln!(out, "{}: ok", spec.name).unwrap();
            }
            EnvAction::Inspect => {
                let b = spec.geometry.bounds();
                writeln!(out, "name: {}", spec.name).unwrap();
                writeln!(out, "bounds: ({}, {}) to ({}, {})", b.min.x, b.min.y, b.max.x, b.max.y).unwrap();
                writeln!(out, "obstacles: {}", spec.geometry.obstacles().len()).unwrap();
                writeln!(out, "spawn regions: {}", spec.spawn_region.len()).unwrap();
                writeln!(out, "goal regions: {}", spec.goal_region.len()).unwrap();
                writeln!(out, "occupied_area: {}", d.occupied_area).unwrap();
                writeln!(out, "min_obstacle_gap: {}", d.min_obstacle_gap).unwrap();
                match clearance {
                    Ok(()) => writeln!(out, "clearance at radius {radius}: ok").unwrap(),
                    Err(e) => writeln!(out, "clearance at radius {radius}: {e}").unwrap(),
                }
            }
        }
    }
    Ok(out)
}

/// Runs one regime into `out`.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainingOutcome, CliError> {
    let resume = resume
        .map(|p| Checkpoint::load(p).map_err(|e| CliError::Config(e.to_string())))
        .transpose()?;
    cfg.write_to(out)?;
    let options = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        env_dirs: cfg.env_dirs.clone(),
    };
    run_training(&cfg.plan(), &cfg.ppo, &cfg.sim, &options, resume).map_err(curriculum_error)
}

/// `[label=]path`; an unlabeled file is labeled by its stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightArg {
    pub label: String,
    pub path: PathBuf,
}

pub fn parse_weight_args(args: &[String]) -> Result<Vec<WeightArg>, CliError> {
    args.iter()
        .map(|a| {
            let (label, path) = match a.split_once('=') {
                Some((l, p)) => (l.to_owned(), PathBuf::from(p)),
                None => {
                    let p = PathBuf::from(a);
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (stem, p)
                }
            };
            if label.is_empty() || path.as_os_str().is_empty() {
                return Err(CliError::Config(format!("bad weight argument `{a}`")));
            }
            Ok(WeightArg { label, path })
        })
        .collect()
}

/// Loads a policy and checks it matches the configured observation and
/// action spaces.
pub fn load_policy(path: &Path, cfg: &RunConfig) -> Result<MlpNetwork, CliError> {
    let net = MlpNetwork::load_weights(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut sizes = vec![OBS_DIM];
    sizes.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
    sizes.push(cfg.sim.n_actions());
    net.expect_shape(&sizes, Head::SoftmaxPolicy)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(net)
}

/// One evaluated model: its label and the per-environment results.
#[derive(Debug, Clone)]
pub struct ModelEval {
    pub label: String,
    pub seeds: Vec<u64>,
    pub summaries: Vec<EvalSummary>,
    pub records: Vec<Vec<EpisodeRecord>>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub models: Vec<ModelEval>,
    /// Present when the labels include e2e and at least one other regime.
    pub gains: Option<GainTable>,
}

/// Evaluates every `(label, policy, seeds)` on every environment, in
/// parallel, with results in input order.
pub fn evaluate(
    models: &[(String, &MlpNetwork, Vec<u64>)],
    envs: &[EnvironmentSpec],
    cfg: &RunConfig,
) -> Result<EvalOutput, CliError> {
    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..envs.len()).map(move |e| (m, e))).collect();
    let done: Vec<Vec<EpisodeRecord>> = jobs
        .par_iter()
        .map(|&(m, e)| eval::run_episodes(models[m].1, &envs[e], &cfg.sim, cfg.episodes, &models[m].2))
        .collect::<Result<_, _>>()
        .map_err(eval_error)?;
    let mut done = done.into_iter();
    let models: Vec<ModelEval> = models
        .iter()
        .map(|(label, _, seeds)| {
            let records: Vec<_> = done.by_ref().take(envs.len()).collect();
            let summaries = envs
                .iter()
                .zip(&records)
                .map(|(env, r)| eval::summarize(&env.name, r, seeds))
                .collect();
            ModelEval {
                label: label.clone(),
                seeds: seeds.clone(),
                summaries,
                records,
            }
        })
        .collect();
    let regimes: Vec<(Regime, EvalSummary)> = models
        .iter()
        .filter_map(|m| m.label.parse::<Regime>().ok().map(|r| (r, m)))
        .flat_map(|(r, m)| m.summaries.iter().map(move |s| (r, s.clone())))
        .collect();
    let has = |x: Regime| regimes.iter().any(|(r, _)| *r == x);
    let gains = if has(Regime::E2e) && (has(Regime::Tol) || has(Regime::Finetune)) {
        Some(gain_table(&regimes).map_err(eval_error)?)
    } else {
        None
    };
    Ok(EvalOutput { models, gains })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Writes `summary.csv`, `episodes.csv` and, when available, `gains.csv`.
pub fn write_eval(result: &EvalOutput, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let summaries: Vec<(&str, usize, &EvalSummary)> = result
        .models
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.summaries.iter().map(move |s| (m.label.as_str(), i, s)))
        .collect();
    eval::write_summaries_csv(&summaries, create(&out.join("summary.csv"))?).map_err(eval_error)?;
    let episodes: Vec<(&str, usize, &[EpisodeRecord])> = result
        .models
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.records.iter().map(move |r| (m.label.as_str(), i, r.as_slice())))
        .collect();
    eval::write_episodes_csv(&episodes, create(&out.join("episodes.csv"))?).map_err(eval_error)?;
    if let Some(g) = &result.gains {
        g.write_csv(create(&out.join("gains.csv"))?).map_err(eval_error)?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, weights: &[WeightArg], envs: &[String], out: &Path) -> Result<EvalOutput, CliError> {
    let nets: Vec<MlpNetwork> = weights.iter().map(|w| load_policy(&w.path, cfg)).collect::<Result<_, _>>()?;
    let specs: Vec<EnvironmentSpec> = envs.iter().map(|e| load_env(e, cfg)).collect::<Result<_, _>>()?;
    cfg.write_to(out)?;
    let models: Vec<_> = weights
        .iter()
        .zip(&nets)
        .map(|(w, n)| (w.label.clone(), n, cfg.eval_seeds.clone()))
        .collect();
    let result = evaluate(&models, &specs, cfg)?;
    write_eval(&result, out)?;
    Ok(result)
}

/// Groups nets by label, keeping first-appearance order.
pub fn group_nets(labeled: Vec<(String, MlpNetwork)>) -> Vec<(String, Vec<MlpNetwork>)> {
    let mut groups: Vec<(String, Vec<MlpNetwork>)> = Vec::new();
    for (label, net) in labeled {
        match groups.iter_mut().find(|(g, _)| *g == label) {
            Some((_, nets)) => nets.push(net),
            None => groups.push((label, vec![net])),
        }
    }
    groups
}

/// Runs the verifier suite and writes `properties.json`, `reports.csv`
/// and `table.csv`.
pub fn verify_groups(
    cfg: &RunConfig,
    groups: &[(String, Vec<MlpNetwork>)],
    props: &[SafetyProperty],
    out: &Path,
) -> Result<SuiteResult, CliError> {
    cfg.write_to(out)?;
    save_properties(props, out.join("properties.json")).map_err(verifier_error)?;
    let suite = verify_suite(groups, props, &cfg.verifier, cfg.mode).map_err(verifier_error)?;
    suite
        .write_reports_csv(create(&out.join("reports.csv"))?)
        .map_err(verifier_error)?;
    suite.write_table_csv(create(&out.join("table.csv"))?).map_err(verifier_error)?;
    Ok(suite)
}

pub fn verify(
    cfg: &RunConfig,
    weights: &[WeightArg],
    properties: Option<&Path>,
    out: &Path,
) -> Result<SuiteResult, CliError> {
    let props = match properties {
        Some(p) => load_properties(p).map_err(verifier_error)?,
        None => builtin_properties(&cfg.sim).map_err(verifier_error)?,
    };
    let labeled = weights
        .iter()
        .map(|w| load_policy(&w.path, cfg).map(|n| (w.label.clone(), n)))
        .collect::<Result<Vec<_>, _>>()?;
    verify_groups(cfg, &group_nets(labeled), &props, out)
}
