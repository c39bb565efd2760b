//! Training regimes over the environment sequence.
//!
//! * `e2e`: the whole budget on `finalEnv`.
//! * `tol`: `baseEnv → intEnv → finalEnv`, freezing one more leading hidden
//!   layer on each transition.
//! * `finetune`: same sequence, nothing frozen.
//!
//! All regimes share one policy and one value network for the whole run and
//! spend the same number of environment steps and PPO updates.
//!
//! Stage boundaries are snapped to the nearest multiple of the PPO horizon so
//! that every update sees a full buffer from a single environment; the final
//! boundary is always exactly `total_budget`. A 600k run with horizon 6000
//! therefore executes 102k / 198k / 300k steps for a 100k / 200k / 300k plan.

use crate::envsuite::{resolve, EnvError, EnvironmentSpec};
use crate::neural::{AdamState, MlpNetwork, NeuralError};
use crate::ppo::{collect_rollout, update, EnvRuntime, EpisodeStats, PpoConfig, PpoError, RolloutBuffer, UpdateStats};
use crate::sim::{SimParams, Terminal, OBS_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

/// Curve rows are emitted once per this many environment steps.
pub const CURVE_INTERVAL: u64 = 10_000;
/// Trailing episode window for the rolling success rate.
pub const SUCCESS_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("environment `{name}` unavailable: {source}")]
    MissingEnvironment { name: String, source: EnvError },
    #[error("checkpoint does not match the plan: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    E2e,
    Tol,
    Finetune,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::E2e, Regime::Tol, Regime::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::E2e => "e2e",
            Regime::Tol => "tol",
            Regime::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "e2e" => Ok(Regime::E2e),
            "tol" => Ok(Regime::Tol),
            "finetune" => Ok(Regime::Finetune),
            other => Err(format!("unknown regime `{other}` (expected e2e, tol or finetune)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub env: String,
    pub budget: u64,
    /// Leading hidden layers frozen when the stage starts.
    pub freeze_on_entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub regime: Regime,
    pub stages: Vec<Stage>,
    pub total_budget: u64,
    pub seed: u64,
    /// Leave a stage once the rolling success reaches this rate over a full
    /// window of that stage's episodes. Unused steps carry into the next
    /// stage. Off by default.
    #[serde(default)]
    pub early_advance: Option<f64>,
}

/// Stage budgets in the ratio 1:2:3 over `baseEnv`, `intEnv`, `finalEnv`
/// for the curriculum regimes; a single `finalEnv` stage for `e2e`.
pub fn default_plan(regime: Regime, total_budget: u64) -> TrainingPlan {
    let stage = |env: &str, budget, freeze_on_entry| Stage {
        env: env.to_owned(),
        budget,
        freeze_on_entry,
    };
    let stages = match regime {
        Regime::E2e => vec![stage("finalEnv", total_budget, 0)],
        Regime::Tol | Regime::Finetune => {
            let base = total_budget / 6;
            let int = total_budget / 3;
            let fin = total_budget - base - int;
            let tol = regime == Regime::Tol;
            vec![
                stage("baseEnv", base, 0),
                stage("intEnv", int, if tol { 1 } else { 0 }),
                stage("finalEnv", fin, if tol { 2 } else { 0 }),
            ]
        }
    };
    TrainingPlan {
        regime,
        stages,
        total_budget,
        seed: 0,
        early_advance: None,
    }
}

impl TrainingPlan {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        let bad = |m: String| Err(CurriculumError::InvalidPlan(m));
        if self.stages.is_empty() || self.stages.len() > 3 {
            return bad(format!("expected 1 to 3 stages, got {}", self.stages.len()));
        }
        let sum: u64 = self.stages.iter().map(|s| s.budget).sum();
        if sum != self.total_budget {
            return bad(format!("stage budgets sum to {sum}, total is {}", self.total_budget));
        }
        if self.total_budget == 0 {
            return bad("total budget must be positive".into());
        }
        match self.regime {
            Regime::E2e => {
                if self.stages.len() != 1 || self.stages[0].freeze_on_entry != 0 {
                    return bad("e2e needs exactly one stage without freezing".into());
                }
            }
            Regime::Tol => {
                if let Some((k, s)) = self.stages.iter().enumerate().find(|(k, s)| s.freeze_on_entry != *k) {
                    return bad(format!("tol stage {} must freeze {k} layers, not {}", k + 1, s.freeze_on_entry));
                }
            }
            Regime::Finetune => {
                if self.stages.iter().any(|s| s.freeze_on_entry != 0) {
                    return bad("finetune never freezes layers".into());
                }
            }
        }
        if let Some(t) = self.early_advance {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("early_advance threshold {t} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Cumulative step at which each stage ends, snapped to the horizon.
    pub fn stage_ends(&self, horizon: usize) -> Vec<u64> {
        let h = horizon as u64;
        let mut ends = Vec::with_capacity(self.stages.len());
        let mut cumulative = 0u64;
        for (k, s) in self.stages.iter().enumerate() {
            cumulative += s.budget;
            let end = if k + 1 == self.stages.len() {
                self.total_budget
            } else {
                ((cumulative + h / 2) / h * h).min(self.total_budget)
            };
            let prev = ends.last().copied().unwrap_or(0);
            ends.push(end.max(prev));
        }
        ends
    }

    /// Network updates the plan performs (one per full or final partial rollout).
    pub fn update_count(&self, horizon: usize) -> u64 {
        let h = horizon as u64;
        let mut prev = 0;
        self.stage_ends(horizon)
            .into_iter()
            .map(|end| {
                let n = end - prev;
                prev = end;
                n.div_ceil(h)
            })
            .sum()
    }
}

/// Fraction of episodes in the window that reached the goal; 0 when empty.
pub fn rolling_success(window: &[EpisodeStats]) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    window.iter().filter(|e| e.terminal == Terminal::Reached).count() as f64 / window.len() as f64
}

fn mean_reward(window: &[EpisodeStats]) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    window.iter().map(|e| e.total_reward).sum::<f64>() / window.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub stage: usize,
    pub rolling_success: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub step: u64,
    pub stage: usize,
    /// Episodes finished so far; the success window is full from 100 on.
    pub episodes: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub plan: TrainingPlan,
    pub policy: MlpNetwork,
    pub value: MlpNetwork,
    pub policy_opt: AdamState,
    pub value_opt: AdamState,
    pub step: u64,
    pub updates: u64,
    /// Next stage to enter.
    pub stage_index: usize,
    pub rng: ChaCha8Rng,
    pub window: Vec<EpisodeStats>,
    pub episodes: u64,
    pub curve: Vec<CurveRow>,
    pub update_log: Vec<UpdateRow>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CurriculumError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|source| CurriculumError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CurriculumError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CurriculumError::Io {
            path: path.to_owned(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where curves, logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Extra directories searched for `<env>.json` after the bundled set.
    pub env_dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub checkpoint: Checkpoint,
    /// Snapshot taken at the end of every stage, in order.
    pub stage_ends: Vec<Checkpoint>,
}

impl TrainingOutcome {
    pub fn curve(&self) -> &[CurveRow] {
        &self.checkpoint.curve
    }
}

/// Runs (or resumes) a training plan to completion.
pub fn run_training(
    plan: &TrainingPlan,
    ppo: &PpoConfig,
    sim: &SimParams,
    options: &TrainOptions,
    resume: Option<Checkpoint>,
) -> Result<TrainingOutcome, CurriculumError> {
    plan.validate()?;
    ppo.validate()?;
    let envs: Vec<Arc<EnvironmentSpec>> = plan
        .stages
        .iter()
        .map(|s| {
            resolve(&s.env, &options.env_dirs)
                .map(Arc::new)
                .map_err(|source| CurriculumError::MissingEnvironment {
                    name: s.env.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| CurriculumError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let mut state = match resume {
        Some(ckpt) => {
            if ckpt.plan != *plan {
                return Err(CurriculumError::CheckpointMismatch(
                    "plan differs from the one the checkpoint was trained with".into(),
                ));
            }
            ckpt
        }
        None => fresh_state(plan, ppo, sim),
    };

    let ends = plan.stage_ends(ppo.horizon);
    let mut stage_ends = Vec::new();
    let mut buffer = RolloutBuffer::new(ppo.horizon);
    let mut window: VecDeque<EpisodeStats> = state.window.iter().copied().collect();

    while state.stage_index < plan.stages.len() {
        let k = state.stage_index;
        let stage = &plan.stages[k];
        log::info!(
            "{} seed {}: stage {} on {} until step {} (freeze {})",
            plan.regime,
            plan.seed,
            k + 1,
            stage.env,
            ends[k],
            stage.freeze_on_entry
        );
        enter_stage(&mut state, stage.freeze_on_entry)?;
        buffer.clear();
        let mut runtime = EnvRuntime::new(envs[k].clone(), sim.clone(), &mut state.rng)?;
        let mut stage_episodes = 0usize;
        let mut stage_successes: VecDeque<bool> = VecDeque::new();

        while state.step < ends[k] {
            let n = (ends[k] - state.step).min(ppo.horizon as u64) as usize;
            buffer.set_capacity(n);
            collect_rollout(&mut runtime, &state.policy, &state.value, &mut buffer, &mut state.rng)?;
            let before = state.step;
            state.step += n as u64;
            let stats = update(
                &mut state.policy,
                &mut state.value,
                &mut buffer,
                ppo,
                &mut state.policy_opt,
                &mut state.value_opt,
                &mut state.rng,
            )?;
            state.updates += 1;
            for ep in runtime.drain_finished() {
                state.episodes += 1;
                stage_episodes += 1;
                window.push_back(ep);
                if window.len() > SUCCESS_WINDOW {
                    window.pop_front();
                }
                stage_successes.push_back(ep.terminal == Terminal::Reached);
                if stage_successes.len() > SUCCESS_WINDOW {
                    stage_successes.pop_front();
                }
            }
            let w = window.make_contiguous();
            state.update_log.push(update_row(state.step, k, state.episodes, w, &stats));
            if before / CURVE_INTERVAL != state.step / CURVE_INTERVAL {
                let row = CurveRow {
                    step: state.step,
                    stage: k,
                    rolling_success: rolling_success(w),
                    mean_reward: mean_reward(w),
                };
                log::info!(
                    "{} seed {}: step {} success {:.3} reward {:.1}",
                    plan.regime,
                    plan.seed,
                    row.step,
                    row.rolling_success,
                    row.mean_reward
                );
                state.curve.push(row);
            }
            if let Some(threshold) = plan.early_advance {
                let rate = stage_successes.iter().filter(|s| **s).count() as f64 / SUCCESS_WINDOW as f64;
                if k + 1 < plan.stages.len() && stage_episodes >= SUCCESS_WINDOW && rate >= threshold {
                    log::info!("{} seed {}: leaving stage {} early at step {}", plan.regime, plan.seed, k + 1, state.step);
                    break;
                }
            }
        }

        state.stage_index = k + 1;
        state.window = window.iter().copied().collect();
        if let Some(dir) = &options.out_dir {
            state.save(dir.join(format!("checkpoint_stage{}.json", k + 1)))?;
        }
        stage_ends.push(state.clone());
    }

    if let Some(dir) = &options.out_dir {
        write_outputs(&state, dir)?;
    }
    Ok(TrainingOutcome {
        checkpoint: state,
        stage_ends,
    })
}

fn fresh_state(plan: &TrainingPlan, ppo: &PpoConfig, sim: &SimParams) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let policy = MlpNetwork::policy(OBS_DIM, sim.n_actions(), &mut rng);
    let value = MlpNetwork::value(OBS_DIM, &mut rng);
    Checkpoint {
        plan: plan.clone(),
        policy_opt: AdamState::new(&policy, ppo.learning_rate),
        value_opt: AdamState::new(&value, ppo.learning_rate),
        policy,
        value,
        step: 0,
        updates: 0,
        stage_index: 0,
        rng,
        window: Vec::new(),
        episodes: 0,
        curve: Vec::new(),
        update_log: Vec::new(),
    }
}

/// Applies the stage's freeze count to both networks and clears Adam
/// moments of layers that just became frozen.
fn enter_stage(state: &mut Checkpoint, freeze: usize) -> Result<(), CurriculumError> {
    for (net, opt) in [
        (&mut state.policy, &mut state.policy_opt),
        (&mut state.value, &mut state.value_opt),
    ] {
        let before = net.frozen_mask();
        net.freeze_layers(freeze)?;
        for (i, (was, now)) in before.iter().zip(net.frozen_mask()).enumerate() {
            if now && !was {
                opt.reset_layer(i);
            }
        }
    }
    Ok(())
}

fn update_row(step: u64, stage: usize, episodes: u64, window: &[EpisodeStats], stats: &UpdateStats) -> UpdateRow {
    UpdateRow {
        step,
        stage,
        episodes,
        mean_reward: mean_reward(window),
        success_rate: rolling_success(window),
        policy_loss: stats.policy_loss,
        value_loss: stats.value_loss,
        entropy: stats.entropy,
        approx_kl: stats.approx_kl,
        clip_fraction: stats.clip_fraction,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CurriculumError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| CurriculumError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(())
}

/// Writes `curve.csv`, `updates.csv`, the final checkpoint and weight files.
pub fn write_outputs(state: &Checkpoint, dir: &Path) -> Result<(), CurriculumError> {
    write_csv(&dir.join("curve.csv"), &state.curve)?;
    write_csv(&dir.join("updates.csv"), &state.update_log)?;
    state.save(dir.join("checkpoint_final.json"))?;
    state.policy.save_weights(dir.join("policy.weights"))?;
    state.value.save_weights(dir.join("value.weights"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_million_step_tol_split() {
        let p = default_plan(Regime::Tol, 6_000_000);
        let got: Vec<_> = p.stages.iter().map(|s| (s.env.as_str(), s.budget, s.freeze_on_entry)).collect();
        assert_eq!(
            got,
            vec![("baseEnv", 1_000_000, 0), ("intEnv", 2_000_000, 1), ("finalEnv", 3_000_000, 2)]
        );
        p.validate().unwrap();
    }

    #[test]
    fn e2e_single_stage() {
        let p = default_plan(Regime::E2e, 6_000_000);
        assert_eq!(
            p.stages,
            vec![Stage {
                env: "finalEnv".into(),
                budget: 6_000_000,
                freeze_on_entry: 0
            }]
        );
    }

    #[test]
    fn finetune_desk_split() {
        let p = default_plan(Regime::Finetune, 600_000);
        let got: Vec<_> = p.stages.iter().map(|s| (s.budget, s.freeze_on_entry)).collect();
        assert_eq!(got, vec![(100_000, 0), (200_000, 0), (300_000, 0)]);
    }

    #[test]
    fn budgets_always_sum_to_total() {
        for total in [1, 5, 6, 7, 599_999, 600_000, 1_234_567] {
            for r in Regime::ALL {
                let p = default_plan(r, total);
                assert_eq!(p.stages.iter().map(|s| s.budget).sum::<u64>(), total);
            }
        }
    }

    #[test]
    fn snapped_boundaries_equalize_updates() {
        let tol = default_plan(Regime::Tol, 600_000);
        assert_eq!(tol.stage_ends(6000), vec![102_000, 300_000, 600_000]);
        for r in Regime::ALL {
            assert_eq!(default_plan(r, 600_000).update_count(6000), 100);
            assert_eq!(default_plan(r, 6_000_000).update_count(6000), 1000);
        }
    }

    #[test]
    fn plan_validation_rejects_bad_freezing() {
        let mut p = default_plan(Regime::Tol, 600);
        p.stages[2].freeze_on_entry = 1;
        assert!(p.validate().is_err());
        let mut p = default_plan(Regime::Finetune, 600);
        p.stages[1].freeze_on_entry = 1;
        assert!(p.validate().is_err());
        let mut p = default_plan(Regime::E2e, 600);
        p.stages[0].budget = 5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rolling_success_fraction() {
        let ep = |t| EpisodeStats {
            terminal: t,
            total_reward: 0.0,
            steps: 1,
        };
        assert_eq!(rolling_success(&[]), 0.0);
        let w = [ep(Terminal::Reached), ep(Terminal::Crashed), ep(Terminal::Timeout), ep(Terminal::Reached)];
        assert_eq!(rolling_success(&w), 0.5);
    }

    #[test]
    fn regime_parse_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert!("sideways".parse::<Regime>().is_err());
    }
}
