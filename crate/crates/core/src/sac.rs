//! Soft actor-critic on mixed real/model batches, with true-environment
//! evaluation and Q-value instrumentation.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::MultiDemoDataset;
use crate::envmodel::GaussianEnsemble;
use crate::envs::{env_reset, env_step_noisy, EnvError, EnvSpec};
use crate::nn::{softplus, Activation, AdamConfig, AdamState, Matrix, MlpCheckpoint, MlpParams, NnError};
use crate::rollout::{
    pool_sample_mixed, rollouts_into_pool, MixedBatch, ModelPool, Policy, RolloutConfig, RolloutError, Transition,
};
use crate::seeding::{rng_from, tag, Rng};

pub const POLICY_FORMAT: &str = "dimorl-pi-v1";
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, thiserror::Error)]
pub enum SacError {
    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },
    #[error("{component} network: {source}")]
    Network { component: &'static str, source: NnError },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    /// Defaults to `−d_a`.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            init_alpha: 1.0,
            target_entropy: None,
            batch_size: 256,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::InvalidConfig(m.into()));
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if [self.actor_lr, self.critic_lr, self.alpha_lr].iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.init_alpha > 0.0 && self.init_alpha.is_finite()) {
            return bad("initial alpha must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

/// Squashed-Gaussian actor, twin critics with Polyak targets, and a
/// log-parameterized temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub actor: MlpParams,
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub log_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_entropy: f64,
    opt: Option<Optimizers>,
}

#[derive(Clone, Debug, PartialEq)]
struct Optimizers {
    actor: AdamState,
    q1: AdamState,
    q2: AdamState,
    alpha: AdamState,
}

/// Losses and diagnostics of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
    pub entropy: f64,
}

/// Reparameterized actions for a batch of states with the quantities the
/// actor gradient needs.
struct ActorSample {
    actions: Matrix,
    log_prob: Vec<f64>,
    /// Pre-squash samples `u`.
    pre: Matrix,
    std: Matrix,
    noise: Matrix,
    /// Whether each log-std entry sat on a clamp boundary.
    clamped: Vec<bool>,
}

/// `ln(1 − tanh²u)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

impl SacAgent {
    pub fn new(env: &EnvSpec, config: &SacConfig, seed: u64) -> Result<Self, SacError> {
        config.validate()?;
        let (d_s, d_a) = (env.d_s, env.d_a);
        let init = |sizes: &[usize], label: &str, component: &'static str| {
            MlpParams::init(sizes, Activation::Relu, &mut rng_from(seed, &[tag(label)]))
                .map_err(|source| SacError::Network { component, source })
        };
        let mut actor_sizes = vec![d_s];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(2 * d_a);
        let mut q_sizes = vec![d_s + d_a];
        q_sizes.extend(&config.hidden);
        q_sizes.push(1);
        let actor = init(&actor_sizes, "actor", "actor")?;
        let q1 = init(&q_sizes, "q1", "critic")?;
        let q2 = init(&q_sizes, "q2", "critic")?;
        let opt = Optimizers {
            actor: AdamState::for_mlp(AdamConfig::with_lr(config.actor_lr), &actor),
            q1: AdamState::for_mlp(AdamConfig::with_lr(config.critic_lr), &q1),
            q2: AdamState::for_mlp(AdamConfig::with_lr(config.critic_lr), &q2),
            alpha: AdamState::new(AdamConfig::with_lr(config.alpha_lr), 1),
        };
        Ok(Self {
            d_s,
            d_a,
            action_low: env.action_low.clone(),
            action_high: env.action_high.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha: config.init_alpha.ln(),
            gamma: config.gamma,
            tau: config.tau,
            target_entropy: config.target_entropy.unwrap_or(-(d_a as f64)),
            opt: Some(opt),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn scale(&self, j: usize) -> (f64, f64) {
        let (lo, hi) = (self.action_low[j], self.action_high[j]);
        (0.5 * (hi + lo), 0.5 * (hi - lo))
    }

    fn squash(&self, j: usize, u: f64) -> f64 {
        let (c, h) = self.scale(j);
        (c + h * u.tanh()).clamp(self.action_low[j].next_up(), self.action_high[j].next_down())
    }

    /// Mean and clamped log-std heads, plus a per-entry clamp mask.
    fn heads(&self, out: &Matrix) -> (Matrix, Matrix, Vec<bool>) {
        let d = self.d_a;
        let mean = out.columns(0, d);
        let raw = out.columns(d, 2 * d);
        let clamped = raw.as_slice().iter().map(|&l| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&l)).collect();
        (mean, raw.map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)), clamped)
    }

    fn sample_from(&self, out: &Matrix, noise: Matrix) -> ActorSample {
        let (mean, log_std, clamped) = self.heads(out);
        let n = out.rows();
        let d = self.d_a;
        let std = log_std.map(f64::exp);
        let mut pre = Matrix::zeros(n, d);
        let mut actions = Matrix::zeros(n, d);
        let mut log_prob = vec![0.0; n];
        for i in 0..n {
            for j in 0..d {
                let xi = noise.get(i, j);
                let u = mean.get(i, j) + std.get(i, j) * xi;
                pre.set(i, j, u);
                actions.set(i, j, self.squash(j, u));
                log_prob[i] += -0.5 * xi * xi - log_std.get(i, j) - 0.5 * LN_2PI - log_one_minus_tanh_sq(u)
                    - self.scale(j).1.ln();
            }
        }
        ActorSample { actions, log_prob, pre, std, noise, clamped }
    }

    fn draw_noise(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(n, d);
        for x in m.as_mut_slice() {
            *x = StandardNormal.sample(rng);
        }
        m
    }

    fn check_states(&self, states: &Matrix) -> Result<(), SacError> {
        if states.cols() != self.d_s {
            return Err(SacError::Dimension(format!("expected {} state columns, got {}", self.d_s, states.cols())));
        }
        Ok(())
    }

    /// Deterministic (squashed mean) or reparameterized actions for a batch.
    pub fn act_batch(&self, states: &Matrix, deterministic: bool, rng: &mut Rng) -> Result<Matrix, SacError> {
        self.check_states(states)?;
        let out = self.actor.forward(states).map_err(|source| SacError::Network { component: "actor", source })?;
        let noise = if deterministic {
            Matrix::zeros(states.rows(), self.d_a)
        } else {
            Self::draw_noise(states.rows(), self.d_a, rng)
        };
        Ok(self.sample_from(&out, noise).actions)
    }

    pub fn act(&self, state: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>, SacError> {
        Ok(self.act_batch(&Matrix::row_vector(state), deterministic, rng)?.into_vec())
    }

    /// Sampled actions and their log-densities under the policy.
    pub fn sample_with_log_prob(&self, states: &Matrix, rng: &mut Rng) -> Result<(Matrix, Vec<f64>), SacError> {
        self.check_states(states)?;
        let out = self.actor.forward(states).map_err(|source| SacError::Network { component: "actor", source })?;
        let s = self.sample_from(&out, Self::draw_noise(states.rows(), self.d_a, rng));
        Ok((s.actions, s.log_prob))
    }

    /// Twin-minimum Q at given state-action rows.
    pub fn min_q(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>, SacError> {
        let x = Matrix::hstack(states, actions);
        let a = self.q1.forward(&x).map_err(|source| SacError::Network { component: "critic", source })?;
        let b = self.q2.forward(&x).map_err(|source| SacError::Network { component: "critic", source })?;
        Ok(a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p.min(*q)).collect())
    }

    /// Optimizer state, created with default settings for agents restored
    /// from a checkpoint.
    fn ensure_opt(&mut self) {
        if self.opt.is_none() {
            self.opt = Some(Optimizers {
                actor: AdamState::for_mlp(AdamConfig::with_lr(3e-4), &self.actor),
                q1: AdamState::for_mlp(AdamConfig::with_lr(3e-4), &self.q1),
                q2: AdamState::for_mlp(AdamConfig::with_lr(3e-4), &self.q2),
                alpha: AdamState::new(AdamConfig::with_lr(3e-4), 1),
            });
        }
    }

    /// `∂/∂log α` of the temperature loss `−log α·(log π + H̄)` averaged over
    /// `log_probs`: equals `H − H̄` with `H = −mean(log π)`.
    pub fn alpha_loss_grad(&self, log_probs: &[f64]) -> f64 {
        let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        -(mean + self.target_entropy)
    }

    /// One critic step, one actor step, one temperature step, then Polyak
    /// averaging of both target critics.
    pub fn update(&mut self, batch: &MixedBatch, rng: &mut Rng) -> Result<UpdateStats, SacError> {
        let n = batch.len();
        if n == 0 {
            return Err(SacError::InvalidConfig("empty batch".into()));
        }
        self.check_states(&batch.states)?;
        self.ensure_opt();
        let alpha = self.alpha();
        let net = |component: &'static str| move |source| SacError::Network { component, source };

        // Critic targets.
        let next_out = self.actor.forward(&batch.next_states).map_err(net("actor"))?;
        let next = self.sample_from(&next_out, Self::draw_noise(n, self.d_a, rng));
        let xn = Matrix::hstack(&batch.next_states, &next.actions);
        let t1 = self.q1_target.forward(&xn).map_err(net("critic"))?;
        let t2 = self.q2_target.forward(&xn).map_err(net("critic"))?;
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let soft = t1.get(i, 0).min(t2.get(i, 0)) - alpha * next.log_prob[i];
                let mask = if batch.dones[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + self.gamma * mask * soft
            })
            .collect();

        let x = Matrix::hstack(&batch.states, &batch.actions);
        let mut critic_loss = 0.0;
        for which in 0..2 {
            let q = if which == 0 { &self.q1 } else { &self.q2 };
            let (out, mut tape) = q.forward_with_tape(&x).map_err(net("critic"))?;
            let mut adj = Matrix::zeros(n, 1);
            let mut loss = 0.0;
            for i in 0..n {
                let e = out.get(i, 0) - y[i];
                loss += e * e;
                adj.set(i, 0, 2.0 * e / n as f64);
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(SacError::NonFiniteLoss { component: "critic" });
            }
            critic_loss += 0.5 * loss;
            let grads = q.backward(&mut tape, &adj).map_err(net("critic"))?.grads;
            let opt = self.opt.as_mut().expect("optimizers initialized");
            let (state, params) = if which == 0 { (&mut opt.q1, &mut self.q1) } else { (&mut opt.q2, &mut self.q2) };
            state.step_mlp(params, &grads).map_err(net("critic"))?;
        }

        // Actor.
        let (out, mut tape) = self.actor.forward_with_tape(&batch.states).map_err(net("actor"))?;
        let cur = self.sample_from(&out, Self::draw_noise(n, self.d_a, rng));
        let xa = Matrix::hstack(&batch.states, &cur.actions);
        let (o1, mut tape1) = self.q1.forward_with_tape(&xa).map_err(net("critic"))?;
        let (o2, mut tape2) = self.q2.forward_with_tape(&xa).map_err(net("critic"))?;
        let mut m1 = Matrix::zeros(n, 1);
        let mut m2 = Matrix::zeros(n, 1);
        let mut q_min = vec![0.0; n];
        for i in 0..n {
            let (a, b) = (o1.get(i, 0), o2.get(i, 0));
            if a <= b {
                m1.set(i, 0, 1.0);
                q_min[i] = a;
            } else {
                m2.set(i, 0, 1.0);
                q_min[i] = b;
            }
        }
        let g1 = self.q1.input_gradient(&mut tape1, &m1).map_err(net("critic"))?;
        let g2 = self.q2.input_gradient(&mut tape2, &m2).map_err(net("critic"))?;
        let mut actor_loss = 0.0;
        let mut adj = Matrix::zeros(n, 2 * self.d_a);
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            actor_loss += alpha * cur.log_prob[i] - q_min[i];
            for j in 0..self.d_a {
                let dq_da = g1.get(i, self.d_s + j) + g2.get(i, self.d_s + j);
                let t = cur.pre.get(i, j).tanh();
                let h = self.scale(j).1;
                let d_u = (alpha * 2.0 * t - dq_da * h * (1.0 - t * t)) * inv_n;
                adj.set(i, j, d_u);
                let d_log_std = if cur.clamped[i * self.d_a + j] {
                    0.0
                } else {
                    -alpha * inv_n + d_u * cur.std.get(i, j) * cur.noise.get(i, j)
                };
                adj.set(i, self.d_a + j, d_log_std);
            }
        }
        actor_loss *= inv_n;
        if !actor_loss.is_finite() {
            return Err(SacError::NonFiniteLoss { component: "actor" });
        }
        let grads = self.actor.backward(&mut tape, &adj).map_err(net("actor"))?.grads;
        let g_alpha = self.alpha_loss_grad(&cur.log_prob);
        let opt = self.opt.as_mut().expect("optimizers initialized");
        opt.actor.step_mlp(&mut self.actor, &grads).map_err(net("actor"))?;

        // Temperature.
        let mean_lp = cur.log_prob.iter().sum::<f64>() * inv_n;
        let alpha_loss = -self.log_alpha * (mean_lp + self.target_entropy);
        if !alpha_loss.is_finite() || !g_alpha.is_finite() {
            return Err(SacError::NonFiniteLoss { component: "alpha" });
        }
        let mut la = [self.log_alpha];
        opt.alpha.step_flat(&mut la, &[g_alpha], &[1]).map_err(net("alpha"))?;
        self.log_alpha = la[0];

        self.q1_target.soft_update_from(&self.q1, self.tau);
        self.q2_target.soft_update_from(&self.q2, self.tau);

        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
            mean_q: q_min.iter().sum::<f64>() * inv_n,
            entropy: -mean_lp,
        })
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            d_s: self.d_s,
            d_a: self.d_a,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
            actor: self.actor.to_checkpoint(),
            q1: self.q1.to_checkpoint(),
            q2: self.q2.to_checkpoint(),
            q1_target: self.q1_target.to_checkpoint(),
            q2_target: self.q2_target.to_checkpoint(),
            log_alpha: self.log_alpha,
            gamma: self.gamma,
            tau: self.tau,
            target_entropy: self.target_entropy,
        }
    }

    /// Restores networks and temperature; optimizer moments start fresh.
    pub fn from_checkpoint(ck: PolicyCheckpoint) -> Result<Self, SacError> {
        if ck.format != POLICY_FORMAT {
            return Err(SacError::Checkpoint(format!("expected {POLICY_FORMAT}, found {}", ck.format)));
        }
        let load = |c: MlpCheckpoint| MlpParams::from_checkpoint(c).map_err(|e| SacError::Checkpoint(e.to_string()));
        let agent = Self {
            d_s: ck.d_s,
            d_a: ck.d_a,
            action_low: ck.action_low,
            action_high: ck.action_high,
            actor: load(ck.actor)?,
            q1: load(ck.q1)?,
            q2: load(ck.q2)?,
            q1_target: load(ck.q1_target)?,
            q2_target: load(ck.q2_target)?,
            log_alpha: ck.log_alpha,
            gamma: ck.gamma,
            tau: ck.tau,
            target_entropy: ck.target_entropy,
            opt: None,
        };
        let ok = agent.actor.input_dim() == agent.d_s
            && agent.actor.output_dim() == 2 * agent.d_a
            && [&agent.q1, &agent.q2, &agent.q1_target, &agent.q2_target]
                .iter()
                .all(|q| q.input_dim() == agent.d_s + agent.d_a && q.output_dim() == 1)
            && agent.action_low.len() == agent.d_a
            && agent.action_high.len() == agent.d_a;
        if !ok {
            return Err(SacError::Checkpoint("inconsistent network shapes".into()));
        }
        Ok(agent)
    }

    pub fn save(&self, path: &Path) -> Result<(), SacError> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| SacError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| SacError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, SacError> {
        let text = std::fs::read_to_string(path).map_err(|e| SacError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(serde_json::from_str(&text).map_err(|e| SacError::Checkpoint(e.to_string()))?)
    }
}

impl Policy for SacAgent {
    fn sample_actions(&self, states: &Matrix, rngs: &mut [Rng]) -> Result<Matrix, RolloutError> {
        let out = self.actor.forward(states).map_err(|e| RolloutError::Policy(e.to_string()))?;
        let mut noise = Matrix::zeros(states.rows(), self.d_a);
        for (i, rng) in rngs.iter_mut().enumerate().take(states.rows()) {
            for x in noise.row_mut(i) {
                *x = StandardNormal.sample(rng);
            }
        }
        Ok(self.sample_from(&out, noise).actions)
    }
}

/// Greedy (squashed-mean) wrapper used for model-return logging.
struct Greedy<'a>(&'a SacAgent);

impl Policy for Greedy<'_> {
    fn sample_actions(&self, states: &Matrix, _rngs: &mut [Rng]) -> Result<Matrix, RolloutError> {
        let out = self.0.actor.forward(states).map_err(|e| RolloutError::Policy(e.to_string()))?;
        Ok(self.0.sample_from(&out, Matrix::zeros(states.rows(), self.0.d_a)).actions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub actor: MlpCheckpoint,
    pub q1: MlpCheckpoint,
    pub q2: MlpCheckpoint,
    pub q1_target: MlpCheckpoint,
    pub q2_target: MlpCheckpoint,
    pub log_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Greedy episodes in the true environment from its own reset distribution.
pub fn evaluate_policy(agent: &SacAgent, env: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalResult, SacError> {
    if episodes == 0 {
        return Err(SacError::InvalidConfig("episodes must be at least 1".into()));
    }
    let mut rng = rng_from(seed, &[tag("evaluate")]);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env_reset(env, &mut rng);
        let mut ret = 0.0;
        for _ in 0..env.horizon {
            let a = agent.act(&s, true, &mut rng)?;
            let step = env_step_noisy(env, &s, &a, &mut rng)?;
            ret += step.reward;
            if step.done {
                break;
            }
            s = step.next_state;
        }
        returns.push(ret);
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalResult { mean, std, returns })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean over seeds of per-seed means, with the population std of those means.
pub fn aggregate_seeds(per_seed_returns: &[Vec<f64>]) -> (f64, f64) {
    let means: Vec<f64> = per_seed_returns.iter().filter(|r| !r.is_empty()).map(|r| mean_std(r).0).collect();
    mean_std(&means)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QMetrics {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

/// Twin-minimum Q at greedy actions over the probe states.
pub fn q_metrics(agent: &SacAgent, probes: &Matrix, threshold: f64) -> Result<QMetrics, SacError> {
    if probes.rows() == 0 {
        return Err(SacError::InvalidConfig("empty probe set".into()));
    }
    let mut rng = rng_from(0, &[]);
    let actions = agent.act_batch(probes, true, &mut rng)?;
    let q = agent.min_q(probes, &actions)?;
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    let min = q.iter().copied().fold(f64::INFINITY, f64::min);
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(QMetrics { mean, min, max, degenerate: !mean.is_finite() || mean.abs() > threshold })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub sac: SacConfig,
    pub rollout: RolloutConfig,
    /// Total SAC updates.
    pub total_steps: usize,
    pub updates_per_epoch: usize,
    pub real_fraction: f64,
    /// Log (and evaluate) every this many epochs, and after the last one.
    pub log_every: usize,
    pub eval_episodes: usize,
    pub model_return_episodes: usize,
    pub q_degen_threshold: f64,
    /// Snapshot the model pool every this many updates (0 disables).
    pub pool_sample_every: usize,
    pub pool_sample_size: usize,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            rollout: RolloutConfig::default(),
            total_steps: 50_000,
            updates_per_epoch: 20,
            real_fraction: 0.05,
            log_every: 50,
            eval_episodes: 10,
            model_return_episodes: 5,
            q_degen_threshold: 1e6,
            pool_sample_every: 0,
            pool_sample_size: 1000,
            seed: 0,
        }
    }
}

impl OfflineConfig {
    pub fn epochs(&self) -> usize {
        self.total_steps / self.updates_per_epoch.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogRow {
    pub epoch: usize,
    pub mean_q: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub model_return: f64,
    pub eval_return: f64,
    pub degenerate: bool,
    pub mean_raw_reward: f64,
    pub mean_penalty: f64,
    pub truncations: usize,
    pub pool_size: usize,
}

/// State-action pairs drawn uniformly from the model pool after `step` updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub step: usize,
    pub state_actions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainLog {
    pub rows: Vec<PolicyLogRow>,
    #[serde(default)]
    pub pool_snapshots: Vec<PoolSnapshot>,
}

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "nan".into()
    }
}

impl PolicyTrainLog {
    /// `epoch,mean_q,actor_loss,critic_loss,alpha,model_return,eval_return,degenerate_flag`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_q,actor_loss,critic_loss,alpha,model_return,eval_return,degenerate_flag\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_f(r.mean_q),
                fmt_f(r.actor_loss),
                fmt_f(r.critic_loss),
                fmt_f(r.alpha),
                fmt_f(r.model_return),
                fmt_f(r.eval_return),
                u8::from(r.degenerate)
            );
        }
        s
    }

    /// `epoch,mean_raw_reward,mean_penalty,truncations,pool_size`.
    pub fn rollout_csv(&self) -> String {
        let mut s = String::from("epoch,mean_raw_reward,mean_penalty,truncations,pool_size\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                fmt_f(r.mean_raw_reward),
                fmt_f(r.mean_penalty),
                r.truncations,
                r.pool_size
            );
        }
        s
    }
}

/// Mean undiscounted return of the greedy policy rolled for the env horizon
/// in the learned model from true-env reset states (raw model rewards).
pub fn model_return(
    agent: &SacAgent,
    ensemble: &GaussianEnsemble,
    env: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64, SacError> {
    let mut rng = rng_from(seed, &[tag("model-return")]);
    let starts: Vec<Vec<f64>> = (0..episodes.max(1)).map(|_| env_reset(env, &mut rng)).collect();
    let config = RolloutConfig { horizon: env.horizon, lambda: 0.0, batch: starts.len(), ..RolloutConfig::default() };
    let (transitions, _) = crate::rollout::generate_rollouts(ensemble, env, &Greedy(agent), &starts, &config, seed)?;
    Ok(transitions.iter().map(|t| t.raw_reward).sum::<f64>() / starts.len() as f64)
}

/// Offline training loop: each epoch adds a batch of model rollouts under the
/// current policy to the pool and runs `updates_per_epoch` SAC updates on
/// mixed batches.
pub fn train_offline(
    ensemble: &GaussianEnsemble,
    dataset: &MultiDemoDataset,
    env: &EnvSpec,
    config: &OfflineConfig,
    starts_from: Option<&MultiDemoDataset>,
) -> Result<(SacAgent, PolicyTrainLog), SacError> {
    config.sac.validate()?;
    config.rollout.validate()?;
    if ensemble.d_s != env.d_s || ensemble.d_a != env.d_a || dataset.meta().d_s != env.d_s || dataset.meta().d_a != env.d_a {
        return Err(SacError::Dimension("ensemble, dataset and environment disagree".into()));
    }
    if config.updates_per_epoch == 0 || config.log_every == 0 {
        return Err(SacError::InvalidConfig("updates_per_epoch and log_every must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.real_fraction) {
        return Err(SacError::InvalidConfig("real_fraction must lie in [0, 1]".into()));
    }
    let mut agent = SacAgent::new(env, &config.sac, config.seed)?;
    let real: Vec<Transition> = dataset.records().map(Transition::from).collect();
    let mut pool = ModelPool::new(config.rollout.capacity())?;
    let mut rng = rng_from(config.seed, &[tag("sac")]);
    let probe_states: Vec<&[f64]> = real.iter().step_by((real.len() / 256).max(1)).map(|t| t.state.as_slice()).collect();
    let probes = Matrix::from_rows(&probe_states);
    let starts_from = starts_from.unwrap_or(dataset);

    let mut log = PolicyTrainLog::default();
    let epochs = config.epochs();
    let schedule = if config.pool_sample_every > 0 {
        crate::analysis::pool_sampling_schedule(config.total_steps, config.pool_sample_every, config.pool_sample_size)
    } else {
        Vec::new()
    };
    let mut acc = UpdateStats::default();
    let mut acc_n = 0usize;
    let (mut raw_sum, mut pen_sum, mut trans_n, mut truncations) = (0.0, 0.0, 0usize, 0usize);
    for epoch in 1..=epochs {
        let stats = rollouts_into_pool(
            ensemble,
            env,
            &agent,
            starts_from,
            &config.rollout,
            &mut pool,
            crate::seeding::derive_seed(config.seed, &[tag("epoch"), epoch as u64]),
        )?;
        raw_sum += stats.mean_raw_reward * stats.transitions as f64;
        pen_sum += stats.mean_penalty * stats.transitions as f64;
        trans_n += stats.transitions;
        truncations += stats.truncations;
        for _ in 0..config.updates_per_epoch {
            let batch = pool_sample_mixed(
                &real,
                &pool,
                config.sac.batch_size,
                if pool.is_empty() { 1.0 } else { config.real_fraction },
                &mut rng,
            )?;
            let s = agent.update(&batch, &mut rng)?;
            acc.critic_loss += s.critic_loss;
            acc.actor_loss += s.actor_loss;
            acc.mean_q += s.mean_q;
            acc_n += 1;
        }
        let step = epoch * config.updates_per_epoch;
        if let Some(&(_, n)) = schedule.iter().find(|(at, _)| *at == step) {
            let mut snap_rng = rng_from(config.seed, &[tag("pool-snapshot"), step as u64]);
            let state_actions = pool
                .sample(n, &mut snap_rng)?
                .into_iter()
                .map(|m| m.transition.state.iter().chain(&m.transition.action).copied().collect())
                .collect();
            log.pool_snapshots.push(PoolSnapshot { step, state_actions });
        }
        if epoch % config.log_every == 0 || epoch == epochs {
            let k = acc_n.max(1) as f64;
            let q = q_metrics(&agent, &probes, config.q_degen_threshold)?;
            let eval = evaluate_policy(&agent, env, config.eval_episodes.max(1), config.seed.wrapping_add(epoch as u64))?;
            let model_ret = model_return(&agent, ensemble, env, config.model_return_episodes, config.seed)?;
            let mean_q = acc.mean_q / k;
            log.rows.push(PolicyLogRow {
                epoch,
                mean_q,
                actor_loss: acc.actor_loss / k,
                critic_loss: acc.critic_loss / k,
                alpha: agent.alpha(),
                model_return: model_ret,
                eval_return: eval.mean,
                degenerate: q.degenerate || !mean_q.is_finite() || mean_q.abs() > config.q_degen_threshold,
                mean_raw_reward: if trans_n > 0 { raw_sum / trans_n as f64 } else { 0.0 },
                mean_penalty: if trans_n > 0 { pen_sum / trans_n as f64 } else { 0.0 },
                truncations,
                pool_size: pool.len(),
            });
            acc = UpdateStats::default();
            acc_n = 0;
            (raw_sum, pen_sum, trans_n, truncations) = (0.0, 0.0, 0, 0);
        }
    }
    Ok((agent, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerShape;
    use rand::Rng as _;
    use crate::rollout::Provenance;

    fn agent() -> SacAgent {
        SacAgent::new(&EnvSpec::point_mass_2d(), &SacConfig { hidden: vec![16], ..SacConfig::default() }, 1).unwrap()
    }

    #[test]
    fn stable_log_jacobian() {
        for u in [-30.0, -3.0, -0.2, 0.0, 0.7, 5.0, 40.0] {
            let t: f64 = f64::tanh(u);
            let naive = (1.0 - t * t).ln();
            let stable = log_one_minus_tanh_sq(u);
            if naive.is_finite() && u.abs() < 15.0 {
                assert!((naive - stable).abs() < 1e-9, "{u}: {naive} vs {stable}");
            }
            assert!(stable.is_finite());
        }
    }

    #[test]
    fn actions_inside_bounds() {
        let mut a = agent();
        // Blow up the mean head so tanh saturates.
        for w in a.actor.as_mut_slice() {
            *w *= 1e3;
        }
        let mut rng = rng_from(4, &[]);
        for _ in 0..200 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            for det in [true, false] {
                for (j, x) in a.act(&s, det, &mut rng).unwrap().iter().enumerate() {
                    assert!(*x > a.action_low[j] && *x < a.action_high[j]);
                }
            }
        }
    }

    #[test]
    fn collapsed_std_gives_deterministic_action() {
        let mut a = agent();
        let last = a.actor.layers().len() - 1;
        let d_a = a.d_a;
        let fan_in = a.actor.layers()[last].input;
        for (k, w) in a.actor.weight_mut(last).iter_mut().enumerate() {
            if k / fan_in >= d_a {
                *w = 0.0;
            }
        }
        for b in &mut a.actor.bias_mut(last)[d_a..] {
            *b = -1e9;
        }
        let mut rng = rng_from(5, &[]);
        let s = [0.3, -0.2, 0.1, 0.0];
        // The log-std clamp at −20 leaves σ ≈ 2e-9.
        let (x, y) = (a.act(&s, false, &mut rng).unwrap(), a.act(&s, true, &mut rng).unwrap());
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let a = SacAgent::new(
            &EnvSpec::pendulum(),
            &SacConfig { hidden: vec![8], ..SacConfig::default() },
            3,
        )
        .unwrap();
        let mut rng = rng_from(6, &[]);
        let states = Matrix::from_rows(&[[0.2, 0.9, -0.5], [1.0, 0.0, 2.0]]);
        let out = a.actor.forward(&states).unwrap();
        let (act, lp) = a.sample_with_log_prob(&states, &mut rng).unwrap();
        for i in 0..2 {
            let mu = out.get(i, 0);
            let sigma = out.get(i, 1).clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
            // Invert the squash and apply the density of a scaled tanh-Gaussian.
            let h = 2.0;
            let t: f64 = act.get(i, 0) / h;
            let u = t.atanh();
            let gauss = -0.5 * ((u - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let oracle = gauss - (h * (1.0 - t * t)).ln();
            assert!((oracle - lp[i]).abs() < 1e-8, "{oracle} vs {}", lp[i]);
        }
    }

    fn bandit_batch(n: usize, r: f64) -> MixedBatch {
        let t = Transition { state: vec![0.1, 0.2, 0.0, 0.0], action: vec![0.3, -0.3], reward: r, next_state: vec![0.0; 4], done: false };
        MixedBatch::from_transitions(&vec![(&t, Provenance::Real); n])
    }

    #[test]
    fn bandit_fixed_point() {
        let mut a = SacAgent::new(
            &EnvSpec::point_mass_2d(),
            &SacConfig { gamma: 0.0, hidden: vec![16], critic_lr: 3e-3, ..SacConfig::default() },
            2,
        )
        .unwrap();
        let batch = bandit_batch(32, 1.5);
        let mut rng = rng_from(7, &[]);
        for _ in 0..3000 {
            a.update(&batch, &mut rng).unwrap();
        }
        let q = a.min_q(&batch.states, &batch.actions).unwrap();
        assert!((q[0] - 1.5).abs() < 1e-3, "{}", q[0]);
    }

    #[test]
    fn unit_tau_copies_targets() {
        let mut a = SacAgent::new(&EnvSpec::point_mass_2d(), &SacConfig { tau: 1.0, hidden: vec![8], ..SacConfig::default() }, 2).unwrap();
        let mut rng = rng_from(8, &[]);
        a.update(&bandit_batch(8, 0.0), &mut rng).unwrap();
        assert_eq!(a.q1_target, a.q1);
        assert_eq!(a.q2_target, a.q2);
    }

    #[test]
    fn temperature_rises_when_entropy_low() {
        let a = agent();
        let target = a.target_entropy;
        // Entropy = −mean log π. Low entropy: log π large.
        let low = vec![-target + 1.0; 4];
        let high = vec![-target - 1.0; 4];
        assert!(a.alpha_loss_grad(&low) < 0.0);
        assert!(a.alpha_loss_grad(&high) > 0.0);
        let mut opt = AdamState::new(AdamConfig::default(), 1);
        let mut la = [a.log_alpha];
        opt.step_flat(&mut la, &[a.alpha_loss_grad(&low)], &[1]).unwrap();
        assert!(la[0] > a.log_alpha);
    }

    #[test]
    fn q_metrics_constant_critic() {
        let mut a = agent();
        let c = 3.25;
        for q in [&mut a.q1, &mut a.q2] {
            *q = MlpParams::from_layers(vec![(
                LayerShape { input: 6, output: 1, activation: Activation::Identity },
                vec![0.0; 6],
                vec![c],
            )])
            .unwrap();
        }
        let probes = Matrix::from_rows(&[[0.0; 4], [1.0, 2.0, 3.0, 4.0]]);
        let m = q_metrics(&a, &probes, 1e6).unwrap();
        assert_eq!((m.mean, m.min, m.max, m.degenerate), (c, c, c, false));
        let big = q_metrics(&a, &probes, 1.0).unwrap();
        assert!(big.degenerate);
        let fresh = q_metrics(&agent(), &probes, 1e6).unwrap();
        assert!(fresh.mean.abs() < 10.0);
    }

    #[test]
    fn evaluation_bounded_and_seeded() {
        let env = EnvSpec::point_mass_2d();
        let a = agent();
        let r1 = evaluate_policy(&a, &env, 3, 9).unwrap();
        let r2 = evaluate_policy(&a, &env, 3, 9).unwrap();
        assert_eq!(r1, r2);
        let (lo, hi) = env.reward_range();
        for r in &r1.returns {
            assert!(*r >= lo * env.horizon as f64 && *r <= hi * env.horizon as f64);
        }
        assert!(evaluate_policy(&a, &env, 0, 9).is_err());
    }

    #[test]
    fn seed_aggregation() {
        let (m, s) = aggregate_seeds(&[vec![1.0, 3.0], vec![5.0], vec![0.0, 0.0, 3.0]]);
        assert!((m - (2.0 + 5.0 + 1.0) / 3.0).abs() < 1e-15);
        let mean: f64 = 8.0 / 3.0;
        let var = ((2.0 - mean).powi(2) + (5.0 - mean).powi(2) + (1.0 - mean).powi(2)) / 3.0;
        assert!((s - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = agent();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pi.json");
        a.save(&p).unwrap();
        let b = SacAgent::load(&p).unwrap();
        assert_eq!(b.to_checkpoint(), a.to_checkpoint());
        let mut rng = rng_from(1, &[]);
        assert_eq!(b.act(&[0.1; 4], true, &mut rng).unwrap(), a.act(&[0.1; 4], true, &mut rng).unwrap());
    }

    #[test]
    fn zero_epochs_returns_untrained_agent() {
        let env = EnvSpec::point_mass_2d();
        let ds = crate::envs::generate_multi_demo_dataset(
            &env,
            &[crate::envs::DemonstratorSpec::new(1, crate::envs::Controller::Random, 0.0)],
            50,
            1,
        )
        .unwrap();
        let ens = GaussianEnsemble::init(&env.name, 4, 2, ds.norm().clone(), &Default::default(), 1).unwrap();
        let cfg = OfflineConfig { total_steps: 0, sac: SacConfig { hidden: vec![8], ..SacConfig::default() }, ..OfflineConfig::default() };
        let (a, log) = train_offline(&ens, &ds, &env, &cfg, None).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(a.to_checkpoint(), SacAgent::new(&env, &cfg.sac, 0).unwrap().to_checkpoint());
    }
}
