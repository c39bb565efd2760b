//! Discrete actor-critic PPO with separate policy and value networks.

use crate::envsuite::{sample_episode_with, EnvError, EnvironmentSpec};
use crate::neural::{adam_step, log_softmax, AdamState, MlpNetwork, NeuralError};
use crate::sim::{ActionId, Episode, Observation, SimError, SimParams, Terminal, OBS_DIM};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("rollout buffer is empty")]
    EmptyBuffer,
    #[error("non-finite probability ratio at sample {sample}: {dump}")]
    NonFiniteRatio { sample: usize, dump: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AdvantageMode {
    /// Discounted return minus the value estimate.
    Paper,
    /// Generalized advantage estimation.
    Gae { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    /// Environment steps between updates.
    pub horizon: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub advantage: AdvantageMode,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            horizon: 6000,
            epochs: 10,
            minibatch_size: 600,
            value_coef: 0.5,
            entropy_coef: 0.01,
            advantage: AdvantageMode::Paper,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.horizon == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return bad("horizon, epochs and minibatch_size must be positive");
        }
        if let AdvantageMode::Gae { lambda } = self.advantage {
            if !(0.0..=1.0).contains(&lambda) {
                return bad("gae lambda must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: [f64; OBS_DIM],
    pub action: usize,
    /// Log-probability of `action` under the policy that chose it.
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// The episode ended with this step.
    pub done: bool,
}

/// Fixed-capacity, episode-ordered trajectory store.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    capacity: usize,
    transitions: Vec<Transition>,
    /// `V(s_T)` for the state after the last record, used when the horizon
    /// cuts an episode short.
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            transitions: Vec::with_capacity(capacity),
            bootstrap_value: 0.0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Changes the capacity of an empty buffer (used for a short final rollout).
    pub fn set_capacity(&mut self, capacity: usize) {
        assert!(self.transitions.is_empty(), "resize only an empty buffer");
        self.capacity = capacity;
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() >= self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(!self.is_full());
        self.transitions.push(t);
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
        self.bootstrap_value = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimates {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Per-step advantages and value targets, before normalization.
///
/// Returns reset at episode ends; an episode cut by the horizon is
/// bootstrapped with `buffer.bootstrap_value`.
pub fn compute_advantages(buffer: &RolloutBuffer, config: &PpoConfig) -> Result<AdvantageEstimates, PpoError> {
    let ts = buffer.transitions();
    if ts.is_empty() {
        return Err(PpoError::EmptyBuffer);
    }
    let n = ts.len();
    let gamma = config.gamma;
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    match config.advantage {
        AdvantageMode::Paper => {
            let mut running = buffer.bootstrap_value;
            for i in (0..n).rev() {
                if ts[i].done {
                    running = 0.0;
                }
                running = ts[i].reward + gamma * running;
                returns[i] = running;
                advantages[i] = running - ts[i].value;
            }
        }
        AdvantageMode::Gae { lambda } => {
            let mut next_value = buffer.bootstrap_value;
            let mut running = 0.0;
            for i in (0..n).rev() {
                let live = if ts[i].done { 0.0 } else { 1.0 };
                let delta = ts[i].reward + gamma * next_value * live - ts[i].value;
                running = delta + gamma * lambda * live * running;
                advantages[i] = running;
                returns[i] = running + ts[i].value;
                next_value = ts[i].value;
            }
        }
    }
    Ok(AdvantageEstimates { advantages, returns })
}

/// Shifts and scales to zero mean, unit variance (population).
pub fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// One gradient step's worth of samples.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub observations: Array2<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn gather(buffer: &RolloutBuffer, est: &AdvantageEstimates, indices: &[usize]) -> Self {
        let ts = buffer.transitions();
        let mut observations = Array2::zeros((indices.len(), OBS_DIM));
        for (row, &i) in observations.rows_mut().into_iter().zip(indices) {
            row.into_slice().expect("contiguous").copy_from_slice(&ts[i].observation);
        }
        Self {
            observations,
            actions: indices.iter().map(|&i| ts[i].action).collect(),
            old_log_probs: indices.iter().map(|&i| ts[i].log_prob).collect(),
            advantages: indices.iter().map(|&i| est.advantages[i]).collect(),
            returns: indices.iter().map(|&i| est.returns[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Per-sample probability ratios `π_new(a|s) / π_old(a|s)`.
    pub ratios: Vec<f64>,
    pub policy_grads: Vec<crate::neural::LayerGrad>,
    pub value_grads: Vec<crate::neural::LayerGrad>,
}

/// Clipped surrogate objective for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// PPO loss and its gradients for both networks:
///
/// `L = −mean(min(r·A, clip(r, 1−ε, 1+ε)·A)) + c_v·mean((V − R)²) − c_e·mean(H)`
pub fn ppo_loss(
    policy: &MlpNetwork,
    value_net: &MlpNetwork,
    batch: &Minibatch,
    config: &PpoConfig,
) -> Result<LossOutput, PpoError> {
    let b = batch.len();
    if b == 0 {
        return Err(PpoError::EmptyBuffer);
    }
    let inv_b = 1.0 / b as f64;
    let eps = config.clip_epsilon;

    let p_cache = policy.forward_batch(batch.observations.view())?;
    let logits = p_cache.logits();
    let k = logits.ncols();
    let mut grad_logits = Array2::zeros((b, k));
    let (mut policy_loss, mut entropy, mut approx_kl, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    let mut ratios = Vec::with_capacity(b);

    for i in 0..b {
        let row = logits.row(i);
        let logp = log_softmax(row.as_slice().expect("standard layout"));
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let log_ratio = logp[a] - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        if !ratio.is_finite() {
            return Err(PpoError::NonFiniteRatio {
                sample: i,
                dump: format!(
                    "action {a}, old log-prob {}, logits {:?}, advantage {adv}",
                    batch.old_log_probs[i],
                    row.to_vec()
                ),
            });
        }
        ratios.push(ratio);
        let unclipped = ratio * adv;
        let bounded = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        policy_loss -= unclipped.min(bounded) * inv_b;
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        approx_kl += ((ratio - 1.0) - log_ratio) * inv_b;
        let h: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        entropy += h * inv_b;

        // d(min)/d(log π_a) is r·A while the unclipped branch is selected
        let d_logp_a = if unclipped <= bounded { ratio * adv } else { 0.0 };
        let mut g = grad_logits.row_mut(i);
        for j in 0..k {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let d_policy = -inv_b * d_logp_a * (onehot - probs[j]);
            let d_entropy = config.entropy_coef * inv_b * probs[j] * (logp[j] + h);
            g[j] = d_policy + d_entropy;
        }
    }

    let v_cache = value_net.forward_batch(batch.observations.view())?;
    let values = v_cache.logits();
    let mut grad_values = Array2::zeros((b, 1));
    let mut value_loss = 0.0;
    for i in 0..b {
        let err = values[[i, 0]] - batch.returns[i];
        value_loss += err * err * inv_b;
        grad_values[[i, 0]] = config.value_coef * 2.0 * err * inv_b;
    }

    let policy_grads = policy.backward(&p_cache, grad_logits.view())?;
    let value_grads = value_net.backward(&v_cache, grad_values.view())?;
    Ok(LossOutput {
        total: policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy,
        policy_loss,
        value_loss,
        entropy,
        approx_kl,
        clip_fraction: clipped as f64 / b as f64,
        ratios,
        policy_grads,
        value_grads,
    })
}

/// Outcome of one finished episode during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub terminal: Terminal,
    pub total_reward: f64,
    pub steps: u32,
}

/// A live environment instance that restarts episodes automatically.
#[derive(Debug, Clone)]
pub struct EnvRuntime {
    spec: Arc<EnvironmentSpec>,
    params: SimParams,
    episode: Episode,
    observation: Observation,
    finished: Vec<EpisodeStats>,
}

impl EnvRuntime {
    pub fn new(spec: Arc<EnvironmentSpec>, params: SimParams, rng: &mut impl Rng) -> Result<Self, PpoError> {
        let (robot, goal) = sample_episode_with(&spec, &params, rng)?;
        let episode = Episode::new(robot, goal);
        let observation = episode.observe(&spec.geometry, &params)?;
        Ok(Self {
            spec,
            params,
            episode,
            observation,
            finished: Vec::new(),
        })
    }

    /// Rebuilds a runtime around an in-flight episode.
    pub fn resume(spec: Arc<EnvironmentSpec>, params: SimParams, episode: Episode) -> Result<Self, PpoError> {
        let observation = episode.observe(&spec.geometry, &params)?;
        Ok(Self {
            spec,
            params,
            episode,
            observation,
            finished: Vec::new(),
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    /// Episodes finished since the last call.
    pub fn drain_finished(&mut self) -> Vec<EpisodeStats> {
        std::mem::take(&mut self.finished)
    }

    /// Steps the current episode and restarts it when it ends. Returns the
    /// reward and whether the episode ended.
    pub fn step(&mut self, action: ActionId, rng: &mut impl Rng) -> Result<(f64, bool), PpoError> {
        let outcome = self.episode.step(&self.spec.geometry, action, &self.params)?;
        let done = outcome.terminal.is_terminal();
        if done {
            self.finished.push(EpisodeStats {
                terminal: outcome.terminal,
                total_reward: self.episode.total_reward,
                steps: self.episode.steps,
            });
            let (robot, goal) = sample_episode_with(&self.spec, &self.params, rng)?;
            self.episode = Episode::new(robot, goal);
            self.observation = self.episode.observe(&self.spec.geometry, &self.params)?;
        } else {
            self.observation = outcome.observation;
        }
        Ok((outcome.reward, done))
    }
}

/// Samples an action index from probabilities with one uniform draw.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Runs the stochastic policy until the buffer is full.
pub fn collect_rollout(
    runtime: &mut EnvRuntime,
    policy: &MlpNetwork,
    value_net: &MlpNetwork,
    buffer: &mut RolloutBuffer,
    rng: &mut impl Rng,
) -> Result<(), PpoError> {
    while !buffer.is_full() {
        let obs = *runtime.observation();
        let logits = policy.logits(obs.as_slice())?;
        let logp = log_softmax(&logits);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let action = sample_categorical(&probs, rng);
        let value = value_net.logits(obs.as_slice())?[0];
        let (reward, done) = runtime.step(ActionId(action), rng)?;
        let mut observation = [0.0; OBS_DIM];
        observation.copy_from_slice(obs.as_slice());
        buffer.push(Transition {
            observation,
            action,
            log_prob: logp[action],
            reward,
            value,
            done,
        });
    }
    buffer.bootstrap_value = match buffer.transitions().last() {
        Some(t) if !t.done => value_net.logits(runtime.observation().as_slice())?[0],
        _ => 0.0,
    };
    Ok(())
}

/// Means over all minibatches of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

/// `epochs` passes of shuffled minibatches, one Adam step per minibatch on
/// each network. Clears the buffer.
#[allow(clippy::too_many_arguments)]
pub fn update(
    policy: &mut MlpNetwork,
    value_net: &mut MlpNetwork,
    buffer: &mut RolloutBuffer,
    config: &PpoConfig,
    policy_opt: &mut AdamState,
    value_opt: &mut AdamState,
    rng: &mut impl Rng,
) -> Result<UpdateStats, PpoError> {
    let mut est = compute_advantages(buffer, config)?;
    if config.normalize_advantages {
        normalize(&mut est.advantages);
    }
    let n = buffer.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats {
        samples: n,
        ..UpdateStats::default()
    };
    let mut batches = 0usize;
    for _ in 0..config.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(config.minibatch_size) {
            let batch = Minibatch::gather(buffer, &est, chunk);
            let out = ppo_loss(policy, value_net, &batch, config)?;
            adam_step(policy, &out.policy_grads, policy_opt)?;
            adam_step(value_net, &out.value_grads, value_opt)?;
            stats.policy_loss += out.policy_loss;
            stats.value_loss += out.value_loss;
            stats.entropy += out.entropy;
            stats.approx_kl += out.approx_kl;
            stats.clip_fraction += out.clip_fraction;
            batches += 1;
        }
    }
    let inv = 1.0 / batches as f64;
    stats.policy_loss *= inv;
    stats.value_loss *= inv;
    stats.entropy *= inv;
    stats.approx_kl *= inv;
    stats.clip_fraction *= inv;
    buffer.clear();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transition(reward: f64, value: f64, done: bool) -> Transition {
        Transition {
            observation: [0.5; OBS_DIM],
            action: 0,
            log_prob: -1.0,
            reward,
            value,
            done,
        }
    }

    fn buffer_of(ts: Vec<Transition>, bootstrap: f64) -> RolloutBuffer {
        let mut b = RolloutBuffer::new(ts.len());
        for t in ts {
            b.push(t);
        }
        b.bootstrap_value = bootstrap;
        b
    }

    #[test]
    fn undiscounted_returns_of_single_episode() {
        let b = buffer_of(
            vec![transition(1.0, 0.0, false), transition(1.0, 0.0, false), transition(1.0, 0.0, true)],
            0.0,
        );
        let cfg = PpoConfig {
            gamma: 1.0,
            ..PpoConfig::default()
        };
        let est = compute_advantages(&b, &cfg).unwrap();
        assert_eq!(est.returns, vec![3.0, 2.0, 1.0]);
        assert_eq!(est.advantages, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn perfect_critic_gives_zero_advantage() {
        let b = buffer_of(
            vec![transition(1.0, 3.0, false), transition(1.0, 2.0, false), transition(1.0, 1.0, true)],
            0.0,
        );
        let cfg = PpoConfig {
            gamma: 1.0,
            ..PpoConfig::default()
        };
        let est = compute_advantages(&b, &cfg).unwrap();
        assert!(est.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn horizon_cut_bootstraps_and_terminal_resets() {
        let b = buffer_of(
            vec![transition(1.0, 0.0, true), transition(2.0, 0.0, false)],
            10.0,
        );
        let cfg = PpoConfig {
            gamma: 0.5,
            ..PpoConfig::default()
        };
        let est = compute_advantages(&b, &cfg).unwrap();
        assert_eq!(est.returns, vec![1.0, 2.0 + 0.5 * 10.0]);
    }

    #[test]
    fn gae_with_lambda_one_matches_discounted_returns() {
        let ts = vec![
            transition(1.0, 0.4, false),
            transition(-2.0, 0.1, false),
            transition(5.0, -0.3, true),
            transition(0.5, 0.2, false),
        ];
        let b = buffer_of(ts, 0.7);
        let paper = compute_advantages(&b, &PpoConfig::default()).unwrap();
        let gae = compute_advantages(
            &b,
            &PpoConfig {
                advantage: AdvantageMode::Gae { lambda: 1.0 },
                ..PpoConfig::default()
            },
        )
        .unwrap();
        for (a, g) in paper.advantages.iter().zip(&gae.advantages) {
            assert!((a - g).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let b = RolloutBuffer::new(4);
        assert!(matches!(compute_advantages(&b, &PpoConfig::default()), Err(PpoError::EmptyBuffer)));
    }

    #[test]
    fn normalization_zero_mean_unit_variance() {
        let mut v = vec![1.0, 2.0, 3.0, 10.0];
        normalize(&mut v);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_arithmetic() {
        // A > 0, r = 1.5, ε = 0.2: clipped branch, contribution 1.2·A
        assert!((clipped_surrogate(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        // A < 0, r = 0.5: clipped at 0.8, min picks 0.8·A
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { gamma: 0.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { clip_epsilon: 0.0, ..PpoConfig::default() }.validate().is_err());
    }

    #[test]
    fn categorical_sampling_edges() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }
}
