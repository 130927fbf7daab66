//! Analytic continuous-control environments and scripted demonstrators.
//!
//! Two tasks are built in:
//!
//! * `point_mass_2d`: state `(px, py, vx, vy)`, action = force in `[-1, 1]²`.
//!   `v' = v + dt·(a/m − c·v)`, `p' = p + dt·v'`. Reward
//!   `−‖p − goal‖² − 0.1·‖a‖²` on the pre-step state. Leaving the box
//!   `|p_i| > 5` terminates the episode.
//! * `pendulum`: state `(cos θ, sin θ, θ̇)` with `θ = 0` upright, torque in
//!   `[-2, 2]`. `θ̈ = (g/l)·sin θ − b·θ̇/(m l²) + u/(m l²)`, `θ̇` clipped to
//!   `±8`. Reward `−(θ² + 0.1·θ̇² + 0.001·u²)` with `θ` wrapped to `[-π, π)`.
//!
//! Both integrate with semi-implicit Euler at `dt = 0.05` over 200-step
//! episodes.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetError, EnvMeta, MultiDemoDataset, SplitSpec, TransitionRecord};
use crate::seeding::{rng_from, tag, Rng};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("non-finite state {0:?}")]
    NonFiniteState(Vec<f64>),
    #[error("state has length {got}, environment expects {expected}")]
    StateDimension { expected: usize, got: usize },
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("invalid demonstrator roster: {0}")]
    InvalidRoster(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMass2d,
    Pendulum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub mass: f64,
    pub damping: f64,
    pub gravity: f64,
    pub length: f64,
    pub goal: Vec<f64>,
    /// Std of Gaussian process noise added by `env_step_noisy`; 0 disables it.
    pub noise_scale: f64,
    pub action_cost: f64,
    /// Point mass: half-width of the bounding box. Pendulum: unused.
    pub box_half_width: f64,
    /// Pendulum: angular velocity clip. Point mass: unused.
    pub max_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub dt: f64,
    pub params: DynamicsParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl EnvSpec {
    pub fn point_mass_2d() -> Self {
        Self {
            name: "point_mass_2d".into(),
            kind: EnvKind::PointMass2d,
            d_s: 4,
            d_a: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            horizon: 200,
            dt: 0.05,
            params: DynamicsParams {
                mass: 1.0,
                damping: 0.5,
                gravity: 0.0,
                length: 0.0,
                goal: vec![0.5, 0.5],
                noise_scale: 0.0,
                action_cost: 0.1,
                box_half_width: 5.0,
                max_speed: f64::INFINITY,
            },
        }
    }

    pub fn pendulum() -> Self {
        Self {
            name: "pendulum".into(),
            kind: EnvKind::Pendulum,
            d_s: 3,
            d_a: 1,
            action_low: vec![-2.0],
            action_high: vec![2.0],
            horizon: 200,
            dt: 0.05,
            params: DynamicsParams {
                mass: 1.0,
                damping: 0.0,
                gravity: 10.0,
                length: 1.0,
                goal: vec![0.0],
                noise_scale: 0.0,
                action_cost: 0.001,
                box_half_width: f64::INFINITY,
                max_speed: 8.0,
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self, EnvError> {
        match name {
            "point_mass_2d" | "pointmass2d" | "PointMass2D" => Ok(Self::point_mass_2d()),
            "pendulum" | "Pendulum" => Ok(Self::pendulum()),
            other => Err(EnvError::UnknownEnv(other.into())),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidSpec(m.into()));
        if self.horizon < 1 {
            return bad("horizon must be >= 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.action_low.len() != self.d_a || self.action_high.len() != self.d_a {
            return bad("action bounds do not match d_a");
        }
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad("action bounds must be finite with low < high");
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> EnvMeta {
        EnvMeta {
            env_name: self.name.clone(),
            d_s: self.d_s,
            d_a: self.d_a,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
        }
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// Documented per-step reward range `[lo, hi]`.
    pub fn reward_range(&self) -> (f64, f64) {
        let p = &self.params;
        let max_action_sq: f64 = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum();
        match self.kind {
            EnvKind::PointMass2d => {
                let dist: f64 = p.goal.iter().map(|g| (p.box_half_width + g.abs()).powi(2)).sum();
                (-(dist + p.action_cost * max_action_sq), 0.0)
            }
            EnvKind::Pendulum => {
                let reset_speed: f64 = 1.0;
                let speed = p.max_speed.max(reset_speed);
                (-(PI * PI + 0.1 * speed * speed + p.action_cost * max_action_sq), 0.0)
            }
        }
    }

    /// Whether a state is terminal (point mass outside its box).
    pub fn is_terminal(&self, state: &[f64]) -> bool {
        match self.kind {
            EnvKind::PointMass2d => state[..2].iter().any(|x| x.abs() > self.params.box_half_width),
            EnvKind::Pendulum => false,
        }
    }

    /// Pendulum angle recovered from `(cos θ, sin θ)`.
    pub fn pendulum_angle(state: &[f64]) -> f64 {
        state[1].atan2(state[0])
    }

    /// Total mechanical energy of a pendulum state (zero potential at the pivot).
    pub fn pendulum_energy(&self, state: &[f64]) -> f64 {
        let p = &self.params;
        let theta = Self::pendulum_angle(state);
        0.5 * p.mass * p.length * p.length * state[2] * state[2] + p.mass * p.gravity * p.length * theta.cos()
    }
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

pub fn env_reset(spec: &EnvSpec, rng: &mut Rng) -> Vec<f64> {
    match spec.kind {
        EnvKind::PointMass2d => {
            vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0, 0.0]
        }
        EnvKind::Pendulum => {
            let theta: f64 = rng.random_range(-PI..PI);
            let omega: f64 = rng.random_range(-1.0..=1.0);
            vec![theta.cos(), theta.sin(), omega]
        }
    }
}

pub fn env_step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<Step, EnvError> {
    if state.len() != spec.d_s {
        return Err(EnvError::StateDimension { expected: spec.d_s, got: state.len() });
    }
    if state.iter().any(|x| !x.is_finite()) {
        return Err(EnvError::NonFiniteState(state.to_vec()));
    }
    let a = spec.clip_action(action);
    let p = &spec.params;
    let dt = spec.dt;
    match spec.kind {
        EnvKind::PointMass2d => {
            let mut next = vec![0.0; 4];
            let mut reward = 0.0;
            for i in 0..2 {
                let v = state[2 + i] + dt * (a[i] / p.mass - p.damping * state[2 + i]);
                next[2 + i] = v;
                next[i] = state[i] + dt * v;
                let d = state[i] - p.goal[i];
                reward -= d * d + p.action_cost * a[i] * a[i];
            }
            let done = spec.is_terminal(&next);
            Ok(Step { next_state: next, reward, done })
        }
        EnvKind::Pendulum => {
            let theta = EnvSpec::pendulum_angle(state);
            let omega = state[2];
            let inertia = p.mass * p.length * p.length;
            let accel = p.gravity / p.length * theta.sin() - p.damping * omega / inertia + a[0] / inertia;
            let omega2 = (omega + dt * accel).clamp(-p.max_speed, p.max_speed);
            let theta2 = theta + dt * omega2;
            let wrapped = wrap_angle(theta);
            let reward = -(wrapped * wrapped + 0.1 * omega * omega + p.action_cost * a[0] * a[0]);
            Ok(Step { next_state: vec![theta2.cos(), theta2.sin(), omega2], reward, done: false })
        }
    }
}

/// `env_step` plus Gaussian process noise of std `params.noise_scale` on the
/// velocity components.
pub fn env_step_noisy(spec: &EnvSpec, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Step, EnvError> {
    let mut step = env_step(spec, state, action)?;
    let sigma = spec.params.noise_scale;
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite noise scale");
        let vel = match spec.kind {
            EnvKind::PointMass2d => 2..4,
            EnvKind::Pendulum => 2..3,
        };
        for i in vel {
            step.next_state[i] += n.sample(rng);
        }
        step.done = spec.is_terminal(&step.next_state);
    }
    Ok(step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    Random,
    Proportional { kp: f64 },
    ProportionalDerivative { kp: f64, kd: f64 },
    EnergySwingup { ke: f64, kp: f64, kd: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstratorSpec {
    pub id: u32,
    #[serde(flatten)]
    pub controller: Controller,
    #[serde(default)]
    pub noise_std: f64,
}

impl DemonstratorSpec {
    pub fn new(id: u32, controller: Controller, noise_std: f64) -> Self {
        Self { id, controller, noise_std }
    }

    pub fn validate(&self, env: &EnvSpec) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidRoster(m));
        if self.id < 1 {
            return bad("demonstrator ids start at 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("demonstrator {}: noise std must be finite and >= 0", self.id));
        }
        let gains: Vec<f64> = match self.controller {
            Controller::Random => vec![],
            Controller::Proportional { kp } => vec![kp],
            Controller::ProportionalDerivative { kp, kd } => vec![kp, kd],
            Controller::EnergySwingup { ke, kp, kd } => {
                if env.kind != EnvKind::Pendulum {
                    return bad(format!("demonstrator {}: energy swing-up needs the pendulum", self.id));
                }
                vec![ke, kp, kd]
            }
        };
        if gains.iter().any(|g| !g.is_finite()) {
            return bad(format!("demonstrator {}: gains must be finite", self.id));
        }
        Ok(())
    }
}

/// Noise-free control law.
pub fn controller_output(env: &EnvSpec, controller: &Controller, state: &[f64]) -> Vec<f64> {
    let p = &env.params;
    match (env.kind, controller) {
        (EnvKind::PointMass2d, Controller::Proportional { kp }) => {
            (0..2).map(|i| kp * (p.goal[i] - state[i])).collect()
        }
        (EnvKind::PointMass2d, Controller::ProportionalDerivative { kp, kd })
        | (EnvKind::PointMass2d, Controller::EnergySwingup { kp, kd, .. }) => {
            (0..2).map(|i| kp * (p.goal[i] - state[i]) - kd * state[2 + i]).collect()
        }
        (EnvKind::Pendulum, Controller::Proportional { kp }) => {
            vec![-kp * wrap_angle(EnvSpec::pendulum_angle(state))]
        }
        (EnvKind::Pendulum, Controller::ProportionalDerivative { kp, kd }) => {
            vec![-kp * wrap_angle(EnvSpec::pendulum_angle(state)) - kd * state[2]]
        }
        (EnvKind::Pendulum, Controller::EnergySwingup { ke, kp, kd }) => {
            let theta = wrap_angle(EnvSpec::pendulum_angle(state));
            if theta.abs() < 0.6 {
                vec![-kp * theta - kd * state[2]]
            } else {
                let upright = p.mass * p.gravity * p.length;
                let deficit = upright - env.pendulum_energy(state);
                let dir = if state[2] >= 0.0 { 1.0 } else { -1.0 };
                vec![ke * deficit * dir]
            }
        }
        (_, Controller::Random) => vec![0.0; env.d_a],
    }
}

/// Controller output plus Gaussian noise, clipped to the action bounds. The
/// random controller samples uniformly in the bounds.
pub fn demonstrator_action(env: &EnvSpec, demo: &DemonstratorSpec, state: &[f64], rng: &mut Rng) -> Vec<f64> {
    if demo.controller == Controller::Random {
        return env.action_low.iter().zip(&env.action_high).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect();
    }
    let mut a = controller_output(env, &demo.controller, state);
    if demo.noise_std > 0.0 {
        let n = Normal::new(0.0, demo.noise_std).expect("validated noise std");
        for x in a.iter_mut() {
            *x += n.sample(rng);
        }
    }
    env.clip_action(&a)
}

/// Reset and action RNG streams of one demonstrator under a generation seed.
pub fn demonstrator_streams(seed: u64, id: u32) -> (Rng, Rng) {
    (rng_from(seed, &[id as u64, tag("reset")]), rng_from(seed, &[id as u64, tag("action")]))
}

/// Roll episodes of each demonstrator until it has contributed
/// `records_per_demo` records. Every demonstrator gets its own reset and
/// action streams (see `demonstrator_streams`).
pub fn generate_multi_demo_dataset(
    env: &EnvSpec,
    demos: &[DemonstratorSpec],
    records_per_demo: usize,
    seed: u64,
) -> Result<MultiDemoDataset, EnvError> {
    env.validate()?;
    if demos.is_empty() {
        return Err(EnvError::InvalidRoster("roster is empty".into()));
    }
    if records_per_demo == 0 {
        return Err(EnvError::InvalidRoster("records per demonstrator must be >= 1".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in demos {
        d.validate(env)?;
        if !seen.insert(d.id) {
            return Err(EnvError::InvalidRoster(format!("duplicate demonstrator id {}", d.id)));
        }
    }
    let mut records = Vec::with_capacity(demos.len() * records_per_demo);
    for d in demos {
        let (mut reset_rng, mut action_rng) = demonstrator_streams(seed, d.id);
        let mut count = 0;
        'episodes: while count < records_per_demo {
            let mut s = env_reset(env, &mut reset_rng);
            for _ in 0..env.horizon {
                let a = demonstrator_action(env, d, &s, &mut action_rng);
                let step = env_step_noisy(env, &s, &a, &mut reset_rng)?;
                records.push(TransitionRecord {
                    state: s,
                    action: a,
                    reward: step.reward,
                    next_state: step.next_state.clone(),
                    done: step.done,
                    demonstrator: d.id,
                });
                count += 1;
                if count == records_per_demo {
                    break 'episodes;
                }
                if step.done {
                    break;
                }
                s = step.next_state;
            }
        }
    }
    Ok(MultiDemoDataset::new(env.meta(), records, SplitSpec::None)?)
}

/// Returns of the complete episodes stored in each demonstrator group.
/// Episodes are recovered from state continuity; an episode counts as
/// complete when it terminated or reached `horizon` steps.
pub fn behavioral_returns(dataset: &MultiDemoDataset, horizon: usize) -> BTreeMap<u32, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (e, group) in dataset.groups() {
        let mut returns = vec![];
        let (mut ret, mut len) = (0.0, 0usize);
        for (i, r) in group.iter().enumerate() {
            if i > 0 && group[i - 1].next_state != r.state {
                ret = 0.0;
                len = 0;
            }
            ret += r.reward;
            len += 1;
            if r.done || len == horizon {
                returns.push(ret);
                ret = 0.0;
                len = 0;
            }
        }
        out.insert(e, returns);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RosterKind {
    Novice,
    Mixed,
    Experienced,
}

impl std::str::FromStr for RosterKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "novice" => Ok(Self::Novice),
            "mixed" => Ok(Self::Mixed),
            "experienced" | "expert" => Ok(Self::Experienced),
            other => Err(format!("unknown roster '{other}' (novice | mixed | experienced)")),
        }
    }
}

/// Built-in five-demonstrator rosters (ids 1..=5).
pub fn builtin_roster(env: EnvKind, kind: RosterKind) -> Vec<DemonstratorSpec> {
    use Controller::*;
    let d = DemonstratorSpec::new;
    match (env, kind) {
        (EnvKind::PointMass2d, RosterKind::Novice) => vec![
            d(1, Random, 0.0),
            d(2, Proportional { kp: 0.3 }, 0.4),
            d(3, Proportional { kp: 0.5 }, 0.3),
            d(4, Proportional { kp: 1.0 }, 0.1),
            d(5, Proportional { kp: 1.5 }, 0.1),
        ],
        (EnvKind::PointMass2d, RosterKind::Mixed) => vec![
            d(1, Random, 0.0),
            d(2, Proportional { kp: 0.3 }, 0.3),
            d(3, Proportional { kp: 1.0 }, 0.1),
            d(4, ProportionalDerivative { kp: 4.0, kd: 2.5 }, 0.05),
            d(5, ProportionalDerivative { kp: 4.0, kd: 2.5 }, 0.5),
        ],
        (EnvKind::PointMass2d, RosterKind::Experienced) => vec![
            d(1, ProportionalDerivative { kp: 3.0, kd: 2.0 }, 0.05),
            d(2, ProportionalDerivative { kp: 4.0, kd: 2.5 }, 0.02),
            d(3, ProportionalDerivative { kp: 5.0, kd: 3.0 }, 0.05),
            d(4, ProportionalDerivative { kp: 6.0, kd: 3.5 }, 0.02),
            d(5, ProportionalDerivative { kp: 8.0, kd: 4.0 }, 0.05),
        ],
        (EnvKind::Pendulum, RosterKind::Novice) => vec![
            d(1, Random, 0.0),
            d(2, Proportional { kp: 2.0 }, 0.5),
            d(3, Proportional { kp: 4.0 }, 0.5),
            d(4, ProportionalDerivative { kp: 5.0, kd: 1.0 }, 0.3),
            d(5, ProportionalDerivative { kp: 8.0, kd: 1.5 }, 0.2),
        ],
        (EnvKind::Pendulum, RosterKind::Mixed) => vec![
            d(1, Random, 0.0),
            d(2, Proportional { kp: 2.0 }, 0.5),
            d(3, ProportionalDerivative { kp: 8.0, kd: 1.5 }, 0.2),
            d(4, EnergySwingup { ke: 1.0, kp: 10.0, kd: 2.0 }, 0.05),
            d(5, EnergySwingup { ke: 1.0, kp: 10.0, kd: 2.0 }, 0.5),
        ],
        (EnvKind::Pendulum, RosterKind::Experienced) => vec![
            d(1, EnergySwingup { ke: 0.8, kp: 10.0, kd: 2.0 }, 0.05),
            d(2, EnergySwingup { ke: 1.0, kp: 12.0, kd: 2.5 }, 0.02),
            d(3, EnergySwingup { ke: 1.2, kp: 10.0, kd: 2.0 }, 0.05),
            d(4, EnergySwingup { ke: 1.5, kp: 14.0, kd: 3.0 }, 0.02),
            d(5, EnergySwingup { ke: 2.0, kp: 12.0, kd: 2.5 }, 0.05),
        ],
    }
}

/// Demonstrators outside every built-in roster, used to build held-out
/// evaluation datasets (ids 101, 102).
pub fn heldout_roster(env: EnvKind) -> Vec<DemonstratorSpec> {
    use Controller::*;
    match env {
        EnvKind::PointMass2d => vec![
            DemonstratorSpec::new(101, Proportional { kp: 0.7 }, 0.2),
            DemonstratorSpec::new(102, ProportionalDerivative { kp: 2.0, kd: 1.5 }, 0.3),
        ],
        EnvKind::Pendulum => vec![
            DemonstratorSpec::new(101, ProportionalDerivative { kp: 6.0, kd: 1.0 }, 0.3),
            DemonstratorSpec::new(102, EnergySwingup { ke: 0.6, kp: 8.0, kd: 1.5 }, 0.3),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent step oracle: the ODEs written out directly.
    fn oracle_step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
        let dt = 0.05;
        match spec.kind {
            EnvKind::PointMass2d => {
                let ax = a[0].clamp(-1.0, 1.0);
                let ay = a[1].clamp(-1.0, 1.0);
                let vx = s[2] + dt * (ax - 0.5 * s[2]);
                let vy = s[3] + dt * (ay - 0.5 * s[3]);
                let r = -((s[0] - 0.5).powi(2) + (s[1] - 0.5).powi(2)) - 0.1 * (ax * ax + ay * ay);
                (vec![s[0] + dt * vx, s[1] + dt * vy, vx, vy], r)
            }
            EnvKind::Pendulum => {
                let th = s[1].atan2(s[0]);
                let u = a[0].clamp(-2.0, 2.0);
                let w = (s[2] + dt * (10.0 * th.sin() + u)).clamp(-8.0, 8.0);
                let th2 = th + dt * w;
                let mut thn = (th + PI) % (2.0 * PI);
                if thn < 0.0 {
                    thn += 2.0 * PI;
                }
                thn -= PI;
                let r = -(thn * thn + 0.1 * s[2] * s[2] + 0.001 * u * u);
                (vec![th2.cos(), th2.sin(), w], r)
            }
        }
    }

    #[test]
    fn point_mass_reset_distribution() {
        let env = EnvSpec::point_mass_2d();
        let mut rng = rng_from(1, &[]);
        let n = 10_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let s = env_reset(&env, &mut rng);
            assert!(s[0].abs() <= 1.0 && s[1].abs() <= 1.0);
            assert_eq!(&s[2..], &[0.0, 0.0]);
            mean[0] += s[0] / n as f64;
            mean[1] += s[1] / n as f64;
        }
        // Var of U(-1,1) is 1/3.
        let sigma = (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean[0].abs() < 3.0 * sigma && mean[1].abs() < 3.0 * sigma, "{mean:?}");
        let a = env_reset(&env, &mut rng_from(5, &[]));
        let b = env_reset(&env, &mut rng_from(5, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn point_mass_goal_is_a_fixed_point() {
        let env = EnvSpec::point_mass_2d();
        let s = vec![0.5, 0.5, 0.0, 0.0];
        let step = env_step(&env, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(step.next_state, s);
        assert_eq!(step.reward, 0.0);
        assert!(!step.done);
    }

    #[test]
    fn pendulum_hanging_is_stable() {
        let env = EnvSpec::pendulum();
        let s = vec![-1.0, PI.sin(), 0.0];
        let step = env_step(&env, &s, &[0.0]).unwrap();
        for (a, b) in s.iter().zip(&step.next_state) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_match_independent_integrator() {
        let mut rng = rng_from(21, &[]);
        for env in [EnvSpec::point_mass_2d(), EnvSpec::pendulum()] {
            for _ in 0..500 {
                let s: Vec<f64> = match env.kind {
                    EnvKind::PointMass2d => (0..4).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    EnvKind::Pendulum => {
                        let t: f64 = rng.random_range(-PI..PI);
                        vec![t.cos(), t.sin(), rng.random_range(-8.0..8.0)]
                    }
                };
                let a: Vec<f64> = (0..env.d_a).map(|_| rng.random_range(-3.0..3.0)).collect();
                let step = env_step(&env, &s, &a).unwrap();
                let (next, r) = oracle_step(&env, &s, &a);
                for (x, y) in step.next_state.iter().zip(&next) {
                    assert!((x - y).abs() <= 1e-12, "{:?} vs {:?}", step.next_state, next);
                }
                assert!((step.reward - r).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let env = EnvSpec::point_mass_2d();
        assert!(matches!(env_step(&env, &[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0]), Err(EnvError::NonFiniteState(_))));
    }

    #[test]
    fn leaving_the_box_terminates() {
        let env = EnvSpec::point_mass_2d();
        let step = env_step(&env, &[4.99, 0.0, 2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(step.done);
    }

    /// Symplectic Euler keeps the energy error bounded with no secular drift;
    /// at small amplitude it stays inside 1e-6 relative.
    #[test]
    fn frictionless_pendulum_conserves_energy() {
        let env = EnvSpec::pendulum();
        assert_eq!(env.params.damping, 0.0);
        let theta0: f64 = PI - 1e-3;
        let mut s = vec![theta0.cos(), theta0.sin(), 0.0];
        let e0 = env.pendulum_energy(&s);
        for _ in 0..1000 {
            s = env_step(&env, &s, &[0.0]).unwrap().next_state;
            let e = env.pendulum_energy(&s);
            assert!(((e - e0) / e0).abs() < 1e-6, "{e} vs {e0}");
        }
    }

    #[test]
    fn large_swing_energy_error_stays_bounded() {
        let env = EnvSpec::pendulum();
        let theta0: f64 = 2.0;
        let mut s = vec![theta0.cos(), theta0.sin(), 0.0];
        let e0 = env.pendulum_energy(&s);
        let mut worst: f64 = 0.0;
        let mut late: f64 = 0.0;
        for k in 0..1000 {
            s = env_step(&env, &s, &[0.0]).unwrap().next_state;
            let err = ((env.pendulum_energy(&s) - e0) / e0).abs();
            if k < 200 {
                worst = worst.max(err);
            } else {
                late = late.max(err);
            }
        }
        // No secular growth: late-window error is not larger than the first window's.
        assert!(late <= 1.5 * worst, "{late} vs {worst}");
        assert!(worst < 0.5);
    }

    #[test]
    fn controllers() {
        let env = EnvSpec::point_mass_2d();
        let mut rng = rng_from(3, &[]);
        let random = DemonstratorSpec::new(1, Controller::Random, 0.0);
        for _ in 0..1000 {
            let a = demonstrator_action(&env, &random, &[0.0; 4], &mut rng);
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        let p = DemonstratorSpec::new(2, Controller::Proportional { kp: 0.8 }, 0.0);
        assert_eq!(demonstrator_action(&env, &p, &[0.5, 0.5, 0.3, -0.2], &mut rng), vec![0.0, 0.0]);
        let pd = DemonstratorSpec::new(3, Controller::ProportionalDerivative { kp: 0.8, kd: 0.5 }, 0.0);
        let a = demonstrator_action(&env, &pd, &[0.2, 0.9, 0.1, -0.4], &mut rng);
        assert_eq!(a, vec![0.8 * (0.5 - 0.2) - 0.5 * 0.1, 0.8 * (0.5 - 0.9) - 0.5 * -0.4]);
    }

    #[test]
    fn dataset_generation_counts_and_tags() {
        let env = EnvSpec::point_mass_2d();
        let roster = builtin_roster(EnvKind::PointMass2d, RosterKind::Novice);
        let ds = generate_multi_demo_dataset(&env, &roster, 450, 8).unwrap();
        assert_eq!(ds.len(), 5 * 450);
        assert_eq!(ds.num_groups(), 5);
        let (lo, hi) = env.reward_range();
        for (e, g) in ds.groups() {
            assert_eq!(g.len(), 450);
            assert!(g.iter().all(|r| r.demonstrator == e && r.reward >= lo && r.reward <= hi));
        }
        let one = generate_multi_demo_dataset(&env, &roster[..1], 1, 8).unwrap();
        assert_eq!((one.len(), one.num_groups()), (1, 1));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let env = EnvSpec::point_mass_2d();
        let roster = vec![
            DemonstratorSpec::new(1, Controller::Random, 0.0),
            DemonstratorSpec::new(1, Controller::Proportional { kp: 1.0 }, 0.0),
        ];
        assert!(matches!(generate_multi_demo_dataset(&env, &roster, 5, 0), Err(EnvError::InvalidRoster(_))));
    }

    #[test]
    fn stored_actions_replay_from_the_action_stream() {
        for env in [EnvSpec::point_mass_2d(), EnvSpec::pendulum()] {
            let roster = builtin_roster(env.kind, RosterKind::Mixed);
            let ds = generate_multi_demo_dataset(&env, &roster, 300, 42).unwrap();
            for d in &roster {
                let (_, mut action_rng) = demonstrator_streams(42, d.id);
                for r in ds.group(d.id).unwrap() {
                    assert_eq!(demonstrator_action(&env, d, &r.state, &mut action_rng), r.action);
                }
            }
        }
    }

    #[test]
    fn better_controller_gives_better_data() {
        let env = EnvSpec::point_mass_2d();
        let roster = vec![
            DemonstratorSpec::new(1, Controller::Random, 0.0),
            DemonstratorSpec::new(2, Controller::ProportionalDerivative { kp: 8.0, kd: 4.0 }, 0.02),
        ];
        let ds = generate_multi_demo_dataset(&env, &roster, 100 * env.horizon, 5).unwrap();
        let returns = behavioral_returns(&ds, env.horizon);
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        assert!(returns[&1].len() >= 100 && returns[&2].len() >= 100);
        assert!(mean(&returns[&2]) > mean(&returns[&1]));
    }

    #[test]
    fn roster_json_round_trip() {
        let roster = builtin_roster(EnvKind::Pendulum, RosterKind::Mixed);
        let text = serde_json::to_string(&roster).unwrap();
        assert!(text.contains("\"kind\":\"energy_swingup\""));
        let back: Vec<DemonstratorSpec> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, roster);
    }
}
