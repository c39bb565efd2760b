//! Greedy evaluation of a trained policy and regime comparison tables.

use crate::curriculum::Regime;
use crate::envsuite::{sample_episode, EnvError, EnvironmentSpec};
use crate::neural::{argmax, MlpNetwork, NeuralError};
use crate::sim::{ActionId, Episode, Observation, SimError, SimParams, Terminal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("gain table needs e2e results for `{0}`")]
    MissingBaseline(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    Crashed,
    Timeout,
}

impl Outcome {
    fn from_terminal(t: Terminal) -> Option<Self> {
        match t {
            Terminal::Reached => Some(Outcome::Reached),
            Terminal::Crashed => Some(Outcome::Crashed),
            Terminal::Timeout => Some(Outcome::Timeout),
            Terminal::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: String,
    pub seed: u64,
    pub episode: usize,
    pub outcome: Outcome,
    pub path_length: f64,
    pub initial_distance: f64,
    pub steps: u32,
}

impl EpisodeRecord {
    pub fn deviation(&self) -> f64 {
        self.path_length / self.initial_distance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: String,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean path/straight-line ratio over successful episodes only; `None`
    /// when nothing succeeded.
    pub mean_deviation: Option<f64>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

/// Spawn seed for episode `index` of evaluation seed `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Rolls out one episode with an arbitrary deterministic controller.
pub fn run_episode_with(
    spec: &EnvironmentSpec,
    params: &SimParams,
    spawn_seed: u64,
    mut controller: impl FnMut(&Observation) -> Result<ActionId, EvalError>,
) -> Result<Episode, EvalError> {
    let (robot, goal) = sample_episode(spec, params, spawn_seed)?;
    let mut episode = Episode::new(robot, goal);
    let mut obs = episode.observe(&spec.geometry, params)?;
    while !episode.terminal.is_terminal() {
        let action = controller(&obs)?;
        obs = episode.step(&spec.geometry, action, params)?.observation;
    }
    Ok(episode)
}

/// Greedy action: argmax of the policy logits, lowest index on ties.
pub fn greedy_action(policy: &MlpNetwork, obs: &Observation) -> Result<ActionId, EvalError> {
    Ok(ActionId(argmax(&policy.logits(obs.as_slice())?)))
}

/// `episodes` greedy episodes for every seed, in seed-then-index order.
pub fn run_episodes(
    policy: &MlpNetwork,
    spec: &EnvironmentSpec,
    params: &SimParams,
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let mut records = Vec::with_capacity(episodes * seeds.len());
    for &seed in seeds {
        for i in 0..episodes {
            let ep = run_episode_with(spec, params, episode_seed(seed, i), |o| greedy_action(policy, o))?;
            records.push(EpisodeRecord {
                env: spec.name.clone(),
                seed,
                episode: i,
                outcome: Outcome::from_terminal(ep.terminal).expect("episode ran to a terminal state"),
                path_length: ep.path_length,
                initial_distance: ep.initial_distance,
                steps: ep.steps,
            });
        }
    }
    Ok(records)
}

pub fn run_eval(
    policy: &MlpNetwork,
    spec: &EnvironmentSpec,
    params: &SimParams,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalSummary, EvalError> {
    let records = run_episodes(policy, spec, params, episodes, seeds)?;
    Ok(summarize(&spec.name, &records, seeds))
}

pub fn summarize(env: &str, records: &[EpisodeRecord], seeds: &[u64]) -> EvalSummary {
    let n = records.len();
    let count = |o| records.iter().filter(|r| r.outcome == o).count();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let reached = count(Outcome::Reached);
    let crashed = count(Outcome::Crashed);
    let deviations: Vec<f64> = records
        .iter()
        .filter(|r| r.outcome == Outcome::Reached)
        .map(EpisodeRecord::deviation)
        .collect();
    EvalSummary {
        env: env.to_owned(),
        success_rate: rate(reached),
        collision_rate: rate(crashed),
        timeout_rate: rate(n - reached - crashed),
        mean_deviation: (!deviations.is_empty()).then(|| deviations.iter().sum::<f64>() / deviations.len() as f64),
        episodes: n,
        seeds: seeds.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainRow {
    pub env: String,
    /// Percentage points of collision rate saved relative to e2e.
    pub tol: Option<f64>,
    pub finetune: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainTable {
    pub rows: Vec<GainRow>,
    pub total: GainRow,
}

/// Collision-rate gain of each curriculum regime over e2e per environment.
/// Several summaries for the same (regime, env) are averaged first.
pub fn gain_table(summaries: &[(Regime, EvalSummary)]) -> Result<GainTable, EvalError> {
    let mut acc: BTreeMap<(String, Regime), (f64, usize)> = BTreeMap::new();
    let mut envs: Vec<String> = Vec::new();
    for (regime, s) in summaries {
        if !envs.contains(&s.env) {
            envs.push(s.env.clone());
        }
        let e = acc.entry((s.env.clone(), *regime)).or_insert((0.0, 0));
        e.0 += s.collision_rate;
        e.1 += 1;
    }
    let mean = |env: &str, r: Regime| acc.get(&(env.to_owned(), r)).map(|(s, n)| s / *n as f64);
    let mut rows = Vec::with_capacity(envs.len());
    for env in &envs {
        let base = mean(env, Regime::E2e).ok_or_else(|| EvalError::MissingBaseline(env.clone()))?;
        let gain = |r| mean(env, r).map(|c| 100.0 * (base - c));
        rows.push(GainRow {
            env: env.clone(),
            tol: gain(Regime::Tol),
            finetune: gain(Regime::Finetune),
        });
    }
    let avg = |f: fn(&GainRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let total = GainRow {
        env: "total".into(),
        tol: avg(|r| r.tol),
        finetune: avg(|r| r.finetune),
    };
    Ok(GainTable { rows, total })
}

impl GainTable {
    pub fn write_csv(&self, w: impl Write) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            out.serialize(row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: &'a str,
    model: usize,
    env: &'a str,
    success_rate: f64,
    collision_rate: f64,
    timeout_rate: f64,
    mean_deviation: Option<f64>,
    episodes: usize,
    seeds: String,
}

/// One row per `(label, model index, summary)`.
pub fn write_summaries_csv(rows: &[(&str, usize, &EvalSummary)], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for &(label, model, s) in rows {
        out.serialize(SummaryRow {
            label,
            model,
            env: &s.env,
            success_rate: s.success_rate,
            collision_rate: s.collision_rate,
            timeout_rate: s.timeout_rate,
            mean_deviation: s.mean_deviation,
            episodes: s.episodes,
            seeds: s.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        })?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    label: &'a str,
    model: usize,
    env: &'a str,
    seed: u64,
    episode: usize,
    outcome: Outcome,
    path_length: f64,
    initial_distance: f64,
    steps: u32,
}

/// Every record of every `(label, model index, records)` group.
pub fn write_episodes_csv(groups: &[(&str, usize, &[EpisodeRecord])], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for &(label, model, records) in groups {
        for r in records {
            out.serialize(EpisodeRow {
                label,
                model,
                env: &r.env,
                seed: r.seed,
                episode: r.episode,
                outcome: r.outcome,
                path_length: r.path_length,
                initial_distance: r.initial_distance,
                steps: r.steps,
            })?;
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(env: &str, collision: f64) -> EvalSummary {
        EvalSummary {
            env: env.into(),
            success_rate: 1.0 - collision,
            collision_rate: collision,
            timeout_rate: 0.0,
            mean_deviation: None,
            episodes: 100,
            seeds: vec![0],
        }
    }

    #[test]
    fn identical_summaries_have_zero_gain() {
        let s = [
            (Regime::E2e, summary("a", 0.3)),
            (Regime::Tol, summary("a", 0.3)),
            (Regime::Finetune, summary("a", 0.3)),
        ];
        let t = gain_table(&s).unwrap();
        assert_eq!(t.rows[0].tol, Some(0.0));
        assert_eq!(t.total.finetune, Some(0.0));
    }

    #[test]
    fn gain_averages_seeds_then_envs() {
        let s = [
            (Regime::E2e, summary("a", 0.30)),
            (Regime::E2e, summary("a", 0.10)),
            (Regime::Tol, summary("a", 0.05)),
            (Regime::E2e, summary("b", 0.50)),
            (Regime::Tol, summary("b", 0.60)),
        ];
        let t = gain_table(&s).unwrap();
        assert!((t.rows[0].tol.unwrap() - 15.0).abs() < 1e-9);
        assert!((t.rows[1].tol.unwrap() + 10.0).abs() < 1e-9);
        assert!((t.total.tol.unwrap() - 2.5).abs() < 1e-9);
        assert_eq!(t.total.finetune, None);
    }

    #[test]
    fn missing_baseline_is_an_error() {
        assert!(matches!(
            gain_table(&[(Regime::Tol, summary("a", 0.1))]),
            Err(EvalError::MissingBaseline(_))
        ));
    }

    #[test]
    fn csv_writers_emit_headers_and_rows() {
        let mut buf = Vec::new();
        write_summaries_csv(&[("tol", 1, &summary("a", 0.25))], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "label,model,env,success_rate,collision_rate,timeout_rate,mean_deviation,episodes,seeds\n\
             tol,1,a,0.75,0.25,0.0,,100,0\n"
        );
        let t = gain_table(&[(Regime::E2e, summary("a", 0.5)), (Regime::Tol, summary("a", 0.25))]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "env,tol,finetune\na,25.0,\ntotal,25.0,\n");
    }

    #[test]
    fn summary_rates_partition() {
        let rec = |outcome, path| EpisodeRecord {
            env: "x".into(),
            seed: 0,
            episode: 0,
            outcome,
            path_length: path,
            initial_distance: 10.0,
            steps: 3,
        };
        let r = [
            rec(Outcome::Reached, 12.0),
            rec(Outcome::Reached, 10.0),
            rec(Outcome::Crashed, 4.0),
            rec(Outcome::Timeout, 40.0),
        ];
        let s = summarize("x", &r, &[0]);
        assert_eq!((s.success_rate, s.collision_rate, s.timeout_rate), (0.5, 0.25, 0.25));
        assert!((s.mean_deviation.unwrap() - 1.1).abs() < 1e-12);
    }
}
