//! Short branched rollouts in the learned model with an uncertainty-penalized
//! reward, and the FIFO pool that stores them.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{MultiDemoDataset, TransitionRecord};
use crate::envmodel::{bound_logvar, GaussianEnsemble, ModelError};
use crate::envs::EnvSpec;
use crate::nn::Matrix;
use crate::seeding::{rng_from, tag, Rng};

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("rollout horizon must be at least 1")]
    ZeroHorizon,
    #[error("no start states")]
    NoStarts,
    #[error("pool capacity must be at least 1")]
    ZeroCapacity,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("real fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("cannot sample {0} transitions from an empty source")]
    EmptySource(&'static str),
    #[error("model and environment disagree: {0}")]
    Mismatch(String),
    #[error("start noise must be finite and non-negative, got {0}")]
    InvalidStartNoise(f64),
    #[error("penalty needs at least one member prediction")]
    NoMembers,
    #[error("policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps a batch of states to a batch of actions, drawing any
/// randomness for row `i` from `rngs[i]`.
pub trait Policy {
    fn sample_actions(&self, states: &Matrix, rngs: &mut [Rng]) -> Result<Matrix, RolloutError>;
}

/// Uniform actions within fixed bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformPolicy {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Policy for UniformPolicy {
    fn sample_actions(&self, states: &Matrix, rngs: &mut [Rng]) -> Result<Matrix, RolloutError> {
        let d = self.low.len();
        let mut out = Matrix::zeros(states.rows(), d);
        for (i, rng) in rngs.iter_mut().enumerate().take(states.rows()) {
            for j in 0..d {
                out.set(i, j, rng.random_range(self.low[j]..=self.high[j]));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub lambda: f64,
    /// Rollouts started per generation call.
    pub batch: usize,
    /// Penalize `‖σ‖₂` instead of `‖σ²‖₂`.
    pub penalty_on_std: bool,
    /// Defaults to `batch · horizon · 5`.
    pub pool_capacity: Option<usize>,
    /// Std of Gaussian noise added to every start state.
    pub start_noise: f64,
    pub start_source: StartSource,
}

/// Where rollout start states come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum StartSource {
    #[default]
    TrainDataset,
    /// A separate dataset file (states only are used).
    ExternalDataset(std::path::PathBuf),
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            lambda: 1.0,
            batch: 400,
            penalty_on_std: false,
            pool_capacity: None,
            start_noise: 0.0,
            start_source: StartSource::TrainDataset,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(RolloutError::InvalidLambda(self.lambda));
        }
        if self.horizon == 0 {
            return Err(RolloutError::ZeroHorizon);
        }
        if self.batch == 0 {
            return Err(RolloutError::ZeroBatch);
        }
        if self.pool_capacity == Some(0) {
            return Err(RolloutError::ZeroCapacity);
        }
        if !(self.start_noise >= 0.0 && self.start_noise.is_finite()) {
            return Err(RolloutError::InvalidStartNoise(self.start_noise));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.pool_capacity.unwrap_or(self.batch * self.horizon * 5)
    }
}

/// `max_i ‖v_i‖₂` over members, where `v_i` is the predicted variance vector
/// (or its element-wise square root when `on_std`).
pub fn uncertainty(variances: &[&[f64]], on_std: bool) -> f64 {
    variances
        .iter()
        .map(|v| {
            let s: f64 = if on_std { v.iter().sum() } else { v.iter().map(|x| x * x).sum() };
            s.sqrt()
        })
        .fold(0.0, f64::max)
}

/// `r − λ·u`. With `λ = 0` the raw reward is returned untouched.
pub fn apply_penalty(raw: f64, penalty: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        raw
    } else {
        raw - lambda * penalty
    }
}

/// `r − λ·max_i ‖Σ_i‖_F` for diagonal member covariances given as variance
/// vectors.
pub fn penalized_reward(raw: f64, member_variances: &[&[f64]], lambda: f64) -> Result<f64, RolloutError> {
    if member_variances.is_empty() {
        return Err(RolloutError::NoMembers);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RolloutError::InvalidLambda(lambda));
    }
    Ok(apply_penalty(raw, uncertainty(member_variances, false), lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl From<&TransitionRecord> for Transition {
    fn from(r: &TransitionRecord) -> Self {
        Self {
            state: r.state.clone(),
            action: r.action.clone(),
            reward: r.reward,
            next_state: r.next_state.clone(),
            done: r.done,
        }
    }
}

/// A model-generated transition; `transition.reward` holds the penalized reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTransition {
    pub transition: Transition,
    pub raw_reward: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPool {
    capacity: usize,
    items: VecDeque<ModelTransition>,
}

impl ModelPool {
    pub fn new(capacity: usize) -> Result<Self, RolloutError> {
        if capacity == 0 {
            return Err(RolloutError::ZeroCapacity);
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 20)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Append in order, evicting the oldest entries beyond capacity.
    pub fn extend(&mut self, transitions: impl IntoIterator<Item = ModelTransition>) {
        for t in transitions {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(t);
        }
    }

    pub fn get(&self, i: usize) -> Option<&ModelTransition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelTransition> {
        self.items.iter()
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut Rng) -> Result<Vec<&'a ModelTransition>, RolloutError> {
        if self.items.is_empty() {
            return Err(RolloutError::EmptySource("model pool"));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Start states drawn uniformly (with replacement) from all records, each
/// coordinate perturbed by `N(0, noise²)`.
pub fn sample_starts(
    dataset: &MultiDemoDataset,
    n: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>, RolloutError> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(RolloutError::InvalidStartNoise(noise));
    }
    let all: Vec<&TransitionRecord> = dataset.records().collect();
    if all.is_empty() {
        return Err(RolloutError::NoStarts);
    }
    Ok((0..n)
        .map(|_| {
            let mut s = all[rng.random_range(0..all.len())].state.clone();
            if noise > 0.0 {
                for x in &mut s {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += noise * z;
                }
            }
            s
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub transitions: usize,
    pub mean_raw_reward: f64,
    pub max_raw_reward: f64,
    pub mean_penalty: f64,
    pub truncations: usize,
    pub terminated: usize,
}

/// Raw per-member predictions without the finiteness gate of
/// `predict_batch`, so bad rows can be dropped individually.
fn member_predictions(
    ens: &GaussianEnsemble,
    member: usize,
    states: &Matrix,
    actions: &Matrix,
) -> Result<(Matrix, Matrix), ModelError> {
    let m = ens.members.get(member).ok_or(ModelError::BadMember(member))?;
    let inputs = ens.model_inputs(states, actions);
    let out = m.net.forward(&inputs).map_err(|source| ModelError::Member { member, source })?;
    let d = ens.target_dim();
    let mut mean = Matrix::zeros(states.rows(), d);
    let mut var = Matrix::zeros(states.rows(), d);
    for i in 0..states.rows() {
        let row = out.row(i);
        for j in 0..d {
            let sd = ens.norm.target_std[j];
            let mut mu = row[j] * sd + ens.norm.target_mean[j];
            if j < ens.d_s {
                mu += states.get(i, j);
            }
            let lv = bound_logvar(row[d + j], m.max_logvar[j], m.min_logvar[j]).value;
            mean.set(i, j, mu);
            var.set(i, j, lv.exp() * sd * sd);
        }
    }
    Ok((mean, var))
}

/// Roll `policy` through the model from each start for up to
/// `config.horizon` steps. Each rollout `i` draws its elite choices, policy
/// noise and model noise from its own stream derived from `(seed, i)`, so the
/// result does not depend on batching. Transitions come out ordered by
/// rollout, then by step. Rollouts end early on a terminal predicted state or
/// a non-finite prediction (counted as a truncation).
pub fn generate_rollouts(
    ensemble: &GaussianEnsemble,
    env: &EnvSpec,
    policy: &dyn Policy,
    starts: &[Vec<f64>],
    config: &RolloutConfig,
    seed: u64,
) -> Result<(Vec<ModelTransition>, RolloutStats), RolloutError> {
    config.validate()?;
    if starts.is_empty() {
        return Err(RolloutError::NoStarts);
    }
    if env.d_s != ensemble.d_s || env.d_a != ensemble.d_a {
        return Err(RolloutError::Mismatch(format!(
            "env ({}, {}) vs model ({}, {})",
            env.d_s, env.d_a, ensemble.d_s, ensemble.d_a
        )));
    }
    let d_s = ensemble.d_s;
    let n = starts.len();
    let mut rngs: Vec<Rng> = (0..n).map(|i| rng_from(seed, &[tag("rollout"), i as u64])).collect();
    let mut per_rollout: Vec<Vec<ModelTransition>> = vec![Vec::new(); n];
    let mut states: Vec<Vec<f64>> = starts.to_vec();
    let mut active: Vec<usize> = (0..n).collect();
    let mut stats = RolloutStats::default();

    for _ in 0..config.horizon {
        if active.is_empty() {
            break;
        }
        let s_mat = Matrix::from_rows(&active.iter().map(|&i| states[i].as_slice()).collect::<Vec<_>>());
        let mut act_rngs: Vec<Rng> = active.iter().map(|&i| rngs[i].clone()).collect();
        let actions = policy.sample_actions(&s_mat, &mut act_rngs)?;
        for (k, &i) in active.iter().enumerate() {
            rngs[i] = act_rngs[k].clone();
        }
        let preds = (0..ensemble.len())
            .map(|m| member_predictions(ensemble, m, &s_mat, &actions))
            .collect::<Result<Vec<_>, _>>()?;

        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let rng = &mut rngs[i];
            let elite = ensemble.random_elite(rng);
            let (mean, var) = (&preds[elite].0, &preds[elite].1);
            let sample: Vec<f64> = mean
                .row(k)
                .iter()
                .zip(var.row(k))
                .map(|(m, v)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + v.sqrt() * z
                })
                .collect();
            let vars: Vec<&[f64]> = preds.iter().map(|p| p.1.row(k)).collect();
            let u = uncertainty(&vars, config.penalty_on_std);
            if !u.is_finite() || sample.iter().any(|x| !x.is_finite()) {
                stats.truncations += 1;
                continue;
            }
            let next_state = sample[..d_s].to_vec();
            let raw = sample[d_s];
            let done = env.is_terminal(&next_state);
            per_rollout[i].push(ModelTransition {
                transition: Transition {
                    state: states[i].clone(),
                    action: actions.row(k).to_vec(),
                    reward: apply_penalty(raw, u, config.lambda),
                    next_state: next_state.clone(),
                    done,
                },
                raw_reward: raw,
                penalty: u,
            });
            if done {
                stats.terminated += 1;
            } else {
                states[i] = next_state;
                still.push(i);
            }
        }
        active = still;
    }

    let out: Vec<ModelTransition> = per_rollout.into_iter().flatten().collect();
    stats.transitions = out.len();
    if !out.is_empty() {
        stats.mean_raw_reward = out.iter().map(|t| t.raw_reward).sum::<f64>() / out.len() as f64;
        stats.mean_penalty = out.iter().map(|t| t.penalty).sum::<f64>() / out.len() as f64;
        stats.max_raw_reward = out.iter().map(|t| t.raw_reward).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok((out, stats))
}

/// Sample `config.batch` starts from `starts_from`, roll them out and append
/// the result to `pool`.
pub fn rollouts_into_pool(
    ensemble: &GaussianEnsemble,
    env: &EnvSpec,
    policy: &dyn Policy,
    starts_from: &MultiDemoDataset,
    config: &RolloutConfig,
    pool: &mut ModelPool,
    seed: u64,
) -> Result<RolloutStats, RolloutError> {
    let mut rng = rng_from(seed, &[tag("starts")]);
    let starts = sample_starts(starts_from, config.batch, config.start_noise, &mut rng)?;
    let (transitions, stats) = generate_rollouts(ensemble, env, policy, &starts, config, seed)?;
    pool.extend(transitions);
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Model,
}

/// A training batch in row-major matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub dones: Vec<bool>,
    pub provenance: Vec<Provenance>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[(&Transition, Provenance)]) -> Self {
        let rows = |f: fn(&Transition) -> &[f64]| Matrix::from_rows(&items.iter().map(|(t, _)| f(t)).collect::<Vec<_>>());
        Self {
            states: rows(|t| &t.state),
            actions: rows(|t| &t.action),
            next_states: rows(|t| &t.next_state),
            rewards: items.iter().map(|(t, _)| t.reward).collect(),
            dones: items.iter().map(|(t, _)| t.done).collect(),
            provenance: items.iter().map(|(_, p)| *p).collect(),
        }
    }
}

/// `ceil(f · batch)` real transitions (raw rewards), the rest from the model
/// pool (penalized rewards). Real rows come first.
pub fn pool_sample_mixed(
    real: &[Transition],
    pool: &ModelPool,
    batch: usize,
    real_fraction: f64,
    rng: &mut Rng,
) -> Result<MixedBatch, RolloutError> {
    if batch == 0 {
        return Err(RolloutError::ZeroBatch);
    }
    if !(0.0..=1.0).contains(&real_fraction) {
        return Err(RolloutError::InvalidFraction(real_fraction));
    }
    let n_real = ((real_fraction * batch as f64 - 1e-9).ceil().max(0.0) as usize).min(batch);
    let n_model = batch - n_real;
    if n_real > 0 && real.is_empty() {
        return Err(RolloutError::EmptySource("real dataset"));
    }
    let mut items: Vec<(&Transition, Provenance)> = Vec::with_capacity(batch);
    for _ in 0..n_real {
        items.push((&real[rng.random_range(0..real.len())], Provenance::Real));
    }
    if n_model > 0 {
        for t in pool.sample(n_model, rng)? {
            items.push((&t.transition, Provenance::Model));
        }
    }
    Ok(MixedBatch::from_transitions(&items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{NormStats, SplitSpec};
    use crate::envmodel::GaussianMember;
    use crate::envs::{generate_multi_demo_dataset, Controller, DemonstratorSpec};
    use crate::nn::{Activation, LayerShape, MlpParams};

    #[test]
    fn penalty_examples() {
        let v1 = [0.04, 0.09];
        let v2 = [0.01, 0.25];
        let u = uncertainty(&[&v1, &v2], false);
        assert!((u - (0.0016f64 + 0.0081).sqrt().max((0.0001f64 + 0.0625).sqrt())).abs() < 1e-15);
        let s = uncertainty(&[&v1, &v2], true);
        assert!((s - 0.26f64.sqrt()).abs() < 1e-15);
        assert_eq!(apply_penalty(-1.5, u, 0.0), -1.5);
        assert_eq!(apply_penalty(1.0, 0.5, 2.0), 0.0);
        // Frobenius norms 0.5 and 1.5.
        let a = [0.3, 0.4];
        let b = [0.9, 1.2];
        assert!((penalized_reward(2.0, &[&a, &b], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(penalized_reward(0.0, &[&[1.0, 1.0]], 1.0).unwrap(), -(2.0f64.sqrt()));
        assert!(matches!(penalized_reward(0.0, &[], 1.0), Err(RolloutError::NoMembers)));
    }

    #[test]
    fn pool_is_fifo() {
        let mut pool = ModelPool::new(3).unwrap();
        let t = |r: f64| ModelTransition {
            transition: Transition { state: vec![r], action: vec![], reward: r, next_state: vec![r], done: false },
            raw_reward: r,
            penalty: 0.0,
        };
        pool.extend((0..5).map(|i| t(i as f64)));
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.iter().map(|x| x.raw_reward).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert!(ModelPool::new(0).is_err());
    }

    #[test]
    fn mixed_counts() {
        let real: Vec<Transition> =
            (0..10).map(|i| Transition { state: vec![i as f64], action: vec![0.0], reward: 1.0, next_state: vec![0.0], done: false }).collect();
        let mut pool = ModelPool::new(10).unwrap();
        pool.extend((0..4).map(|_| ModelTransition {
            transition: Transition { state: vec![0.0], action: vec![0.0], reward: -1.0, next_state: vec![0.0], done: true },
            raw_reward: 0.0,
            penalty: 1.0,
        }));
        let mut rng = rng_from(1, &[]);
        for (f, want) in [(0.05, 13), (0.5, 128), (0.0, 0), (1.0, 256), (0.1, 26)] {
            let b = pool_sample_mixed(&real, &pool, 256, f, &mut rng).unwrap();
            let n_real = b.provenance.iter().filter(|p| **p == Provenance::Real).count();
            assert_eq!(n_real, want, "f = {f}");
            for (p, r) in b.provenance.iter().zip(&b.rewards) {
                assert_eq!(*r, if *p == Provenance::Real { 1.0 } else { -1.0 });
            }
        }
        let empty = ModelPool::new(1).unwrap();
        assert!(pool_sample_mixed(&real, &empty, 8, 0.5, &mut rng).is_err());
        assert!(pool_sample_mixed(&real, &pool, 8, 1.5, &mut rng).is_err());
    }

    fn constant_ensemble(env: &EnvSpec, means: &[f64], raw_lv: f64) -> GaussianEnsemble {
        let d_in = env.d_s + env.d_a;
        let d = env.d_s + 1;
        let mut bias = means.to_vec();
        bias.extend(std::iter::repeat_n(raw_lv, d));
        let net = MlpParams::from_layers(vec![(
            LayerShape { input: d_in, output: 2 * d, activation: Activation::Identity },
            vec![0.0; 2 * d * d_in],
            bias,
        )])
        .unwrap();
        let member = GaussianMember { net, max_logvar: vec![0.5; d], min_logvar: vec![-10.0; d] };
        GaussianEnsemble {
            env_name: env.name.clone(),
            d_s: env.d_s,
            d_a: env.d_a,
            members: vec![member.clone(), member],
            elites: vec![0, 1],
            norm: NormStats {
                input_mean: vec![0.0; d_in],
                input_std: vec![1.0; d_in],
                target_mean: vec![0.0; d],
                target_std: vec![1.0; d],
            },
        }
    }

    #[test]
    fn rollouts_follow_model_and_stop_on_terminal() {
        let env = EnvSpec::point_mass_2d();
        // Near-deterministic model: zero state change, reward -2, variance at the floor.
        let ens = constant_ensemble(&env, &[0.0, 0.0, 0.0, 0.0, -2.0], -1e6);
        let policy = UniformPolicy { low: env.action_low.clone(), high: env.action_high.clone() };
        let cfg = RolloutConfig { horizon: 4, lambda: 0.0, batch: 3, ..RolloutConfig::default() };
        let starts = vec![vec![0.0; 4], vec![1.0, 1.0, 0.0, 0.0], vec![4.99, 0.0, 0.0, 0.0]];
        let (out, stats) = generate_rollouts(&ens, &env, &policy, &starts, &cfg, 7).unwrap();
        assert_eq!(stats.truncations, 0);
        assert_eq!(out.len(), 12);
        for r in out.chunks(4) {
            for w in r.windows(2) {
                assert_eq!(w[0].transition.next_state, w[1].transition.state);
            }
        }
        assert!(out.iter().all(|t| (t.raw_reward + 2.0).abs() < 0.05));
        let (again, _) = generate_rollouts(&ens, &env, &policy, &starts, &cfg, 7).unwrap();
        assert_eq!(out, again);

        let far = constant_ensemble(&env, &[1.0, 0.0, 0.0, 0.0, 0.0], -1e6);
        let (out, stats) = generate_rollouts(&far, &env, &policy, &starts[2..], &cfg, 7).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].transition.done);
        assert_eq!(stats.terminated, 1);
    }

    #[test]
    fn rollout_streams_independent_of_batch() {
        let env = EnvSpec::point_mass_2d();
        let ens = constant_ensemble(&env, &[0.1, 0.0, 0.0, 0.0, -1.0], 0.0);
        let policy = UniformPolicy { low: env.action_low.clone(), high: env.action_high.clone() };
        let cfg = RolloutConfig { horizon: 3, lambda: 1.0, batch: 2, ..RolloutConfig::default() };
        let starts = vec![vec![0.0; 4], vec![0.5, 0.5, 0.0, 0.0]];
        let (both, _) = generate_rollouts(&ens, &env, &policy, &starts, &cfg, 3).unwrap();
        let (first, _) = generate_rollouts(&ens, &env, &policy, &starts[..1], &cfg, 3).unwrap();
        assert_eq!(&both[..3], &first[..]);
        for t in &both {
            assert!((t.transition.reward - (t.raw_reward - t.penalty)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_predictions_truncate() {
        let env = EnvSpec::point_mass_2d();
        let ens = constant_ensemble(&env, &[f64::MAX, 0.0, 0.0, 0.0, 0.0], 0.5);
        let mut ens = ens;
        ens.norm.target_std[0] = 10.0;
        let policy = UniformPolicy { low: env.action_low.clone(), high: env.action_high.clone() };
        let cfg = RolloutConfig { horizon: 3, lambda: 1.0, batch: 2, ..RolloutConfig::default() };
        let (out, stats) = generate_rollouts(&ens, &env, &policy, &[vec![0.0; 4]], &cfg, 1).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.truncations, 1);
    }

    #[test]
    fn starts_come_from_dataset() {
        let env = EnvSpec::point_mass_2d();
        let ds = generate_multi_demo_dataset(&env, &[DemonstratorSpec::new(1, Controller::Random, 0.0)], 50, 1).unwrap();
        let ds = ds.resplit(SplitSpec::None).unwrap();
        let mut rng = rng_from(2, &[]);
        let starts = sample_starts(&ds, 20, 0.0, &mut rng).unwrap();
        for s in starts {
            assert!(ds.records().any(|r| r.state == s));
        }
        assert!(sample_starts(&ds, 1, -0.1, &mut rng).is_err());
    }
}
