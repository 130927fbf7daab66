//! Run configuration: flat `key = value` lines with dotted keys (a TOML
//! subset), e.g.
//!
//! ```text
//! env = "point_mass_2d"
//! roster = "novice"
//! seeds = [1, 2, 3]
//! sweep.beta = [0, 5, 10, 20]
//! rollout.horizon = 5
//! ```
//!
//! Every key is optional; unknown keys are rejected with a suggestion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::envmodel::RexTrainConfig;
use crate::envs::{DemonstratorSpec, EnvSpec, RosterKind};
use crate::rollout::StartSource;
use crate::sac::OfflineConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("syntax: {0}")]
    Syntax(String),
    #[error("unknown key '{key}'{hint}")]
    UnknownKey { key: String, hint: String },
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RosterSource {
    Builtin(RosterKind),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub horizon: Vec<usize>,
    pub sigma: Vec<f64>,
}

/// One `(β, λ, h, σ)` combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub sigma: f64,
}

impl SweepCell {
    /// Directory-safe label, e.g. `beta=20,lambda=1,h=5,sigma=0`.
    pub fn label(&self) -> String {
        format!("beta={},lambda={},h={},sigma={}", self.beta, self.lambda, self.horizon, self.sigma)
    }
}

impl SweepGrid {
    /// Cartesian product in `β, λ, h, σ` nesting order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &beta in &self.beta {
            for &lambda in &self.lambda {
                for &horizon in &self.horizon {
                    for &sigma in &self.sigma {
                        out.push(SweepCell { beta, lambda, horizon, sigma });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub records_per_demo: usize,
    pub holdout_fraction: f64,
    /// Records per held-out evaluation demonstrator.
    pub heldout_records: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Pool snapshot interval in SAC updates (0 disables PCA sampling).
    pub pca_every: usize,
    pub pca_samples: usize,
    pub degenerate_threshold: f64,
    pub marks: Vec<usize>,
    pub degenerate_rollouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub roster: RosterSource,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub model: RexTrainConfig,
    pub offline: OfflineConfig,
    pub eval_episodes: usize,
    pub grid: SweepGrid,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::point_mass_2d(),
            roster: RosterSource::Builtin(RosterKind::Novice),
            data: DataConfig { records_per_demo: 4000, holdout_fraction: 0.1, heldout_records: 2000, seed: 0 },
            seeds: vec![1, 2, 3],
            out: PathBuf::from("out"),
            model: RexTrainConfig::default(),
            offline: OfflineConfig::default(),
            eval_episodes: 100,
            grid: SweepGrid { beta: vec![0.0, 20.0], lambda: vec![1.0], horizon: vec![5], sigma: vec![0.0] },
            analysis: AnalysisConfig {
                pca_every: 10_000,
                pca_samples: 1000,
                degenerate_threshold: 1e6,
                marks: vec![5, 10],
                degenerate_rollouts: 100,
            },
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("env", "environment name: point_mass_2d | pendulum"),
    ("env.horizon", "episode length"),
    ("env.noise_scale", "process noise std on velocities"),
    ("roster", "novice | mixed | experienced, or a path to a JSON roster"),
    ("seeds", "list of run seeds"),
    ("out", "output directory"),
    ("data.records_per_demo", "records generated per demonstrator"),
    ("data.holdout_fraction", "held-out share of every demonstrator group"),
    ("data.heldout_records", "records per held-out evaluation demonstrator"),
    ("data.seed", "seed for dataset generation"),
    ("model.members", "ensemble size"),
    ("model.elites", "elite count"),
    ("model.hidden", "hidden layer widths"),
    ("model.weight_decay", "weight-decay coefficient"),
    ("model.var_bound_coef", "log-variance bound regularizer"),
    ("model.batch_per_domain", "minibatch rows per demonstrator"),
    ("model.steps_per_epoch", "gradient steps per epoch"),
    ("model.max_epochs", "cap on ERM epochs"),
    ("model.patience", "epochs without improvement before switching phase"),
    ("model.improvement_threshold", "relative improvement that resets patience"),
    ("model.lr", "Adam learning rate"),
    ("model.init_max_logvar", "initial upper log-variance bound"),
    ("model.init_min_logvar", "initial lower log-variance bound"),
    ("rollout.batch", "rollouts started per epoch"),
    ("rollout.penalty_on_std", "penalize std instead of variance"),
    ("rollout.pool_capacity", "model pool capacity"),
    ("rollout.start_dataset", "external dataset for rollout start states"),
    ("sac.gamma", "discount"),
    ("sac.tau", "target smoothing"),
    ("sac.hidden", "hidden layer widths"),
    ("sac.actor_lr", "actor learning rate"),
    ("sac.critic_lr", "critic learning rate"),
    ("sac.alpha_lr", "temperature learning rate"),
    ("sac.init_alpha", "initial temperature"),
    ("sac.target_entropy", "target entropy (default -d_a)"),
    ("sac.batch_size", "SAC batch size"),
    ("sac.total_steps", "total SAC updates"),
    ("sac.updates_per_epoch", "SAC updates per rollout epoch"),
    ("sac.real_fraction", "real-data share of each batch"),
    ("sac.log_every", "epochs between log rows"),
    ("sac.log_eval_episodes", "true-env episodes per log row"),
    ("sac.model_return_episodes", "model episodes per log row"),
    ("sac.q_degen_threshold", "|mean Q| marking a degenerate epoch"),
    ("eval.episodes", "true-env episodes for policy evaluation"),
    ("sweep.beta", "variance-penalty weights (β)"),
    ("sweep.lambda", "reward-penalty coefficients (λ)"),
    ("sweep.h", "rollout lengths"),
    ("sweep.sigma", "start-state noise std (σ)"),
    ("analysis.pca_every", "pool snapshot interval in SAC updates"),
    ("analysis.pca_samples", "transitions per pool snapshot"),
    ("analysis.degenerate_threshold", "reward magnitude flagged as degenerate"),
    ("analysis.marks", "step marks for degenerate-reward counts"),
    ("analysis.degenerate_rollouts", "rollouts per model for degenerate-reward scan"),
];

/// Greek aliases accepted in place of the spelled-out names.
fn canonical(key: &str) -> String {
    key.replace('β', "beta").replace('λ', "lambda").replace('σ', "sigma")
}

/// `" (did you mean 'sweep.lambda' (λ)?)"`, or empty when nothing is close.
fn suggest(key: &str) -> String {
    let last = |k: &str| k.rsplit('.').next().unwrap_or(k).to_string();
    let key_last = last(key);
    let best = KEYS
        .iter()
        .map(|(k, _)| (*k, strsim::levenshtein(key, k).min(strsim::levenshtein(&key_last, &last(k)))))
        .min_by_key(|&(_, d)| d);
    match best {
        Some((k, d)) if d <= 3 => {
            let greek = match last(k).as_str() {
                "beta" => " (β)",
                "lambda" => " (λ)",
                "sigma" => " (σ)",
                _ => "",
            };
            format!(" (did you mean '{k}'{greek}?)")
        }
        _ => String::new(),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { canonical(k) } else { format!("{prefix}.{}", canonical(k)) };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(invalid(key, format!("expected a number, got {other}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(invalid(key, format!("expected a non-negative integer, got {other}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    as_usize(key, v).map(|x| x as u64)
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| invalid(key, format!("expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| invalid(key, format!("expected a string, got {v}")))
}

/// A scalar is accepted as a one-element list.
fn as_list<T>(key: &str, v: &Value, f: fn(&str, &Value) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    let items = match v {
        Value::Array(a) => a.iter().map(|x| f(key, x)).collect::<Result<Vec<_>, _>>()?,
        other => vec![f(key, other)?],
    };
    if items.is_empty() {
        return Err(invalid(key, "list must not be empty"));
    }
    Ok(items)
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parse config text; relative paths resolve against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        // Greek aliases are not valid bare TOML keys, so rewrite them first.
        let text: String = text
            .lines()
            .map(|line| match line.split_once('=') {
                Some((k, v)) => format!("{}={v}\n", canonical(k)),
                None => format!("{}\n", canonical(line)),
            })
            .collect();
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut kv = BTreeMap::new();
        flatten("", &table, &mut kv);
        for key in kv.keys() {
            if !KEYS.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::UnknownKey { key: key.clone(), hint: suggest(key) });
            }
        }
        let mut c = RunConfig::default();
        if let Some(v) = kv.get("env") {
            c.env = EnvSpec::by_name(as_str("env", v)?).map_err(|e| invalid("env", e.to_string()))?;
        }
        let resolve = |p: &str| if Path::new(p).is_absolute() { PathBuf::from(p) } else { base.join(p) };
        for (key, v) in &kv {
            let k = key.as_str();
            match k {
                "env" => {}
                "env.horizon" => c.env.horizon = as_usize(k, v)?,
                "env.noise_scale" => c.env.params.noise_scale = as_f64(k, v)?,
                "roster" => {
                    let s = as_str(k, v)?;
                    c.roster = match s.parse::<RosterKind>() {
                        Ok(kind) => RosterSource::Builtin(kind),
                        Err(_) if s.ends_with(".json") => RosterSource::File(resolve(s)),
                        Err(e) => return Err(invalid(k, e)),
                    };
                }
                "seeds" => c.seeds = as_list(k, v, as_u64)?,
                "out" => c.out = resolve(as_str(k, v)?),
                "data.records_per_demo" => c.data.records_per_demo = as_usize(k, v)?,
                "data.holdout_fraction" => c.data.holdout_fraction = as_f64(k, v)?,
                "data.heldout_records" => c.data.heldout_records = as_usize(k, v)?,
                "data.seed" => c.data.seed = as_u64(k, v)?,
                "model.members" => c.model.ensemble.members = as_usize(k, v)?,
                "model.elites" => c.model.ensemble.elites = as_usize(k, v)?,
                "model.hidden" => c.model.ensemble.hidden = as_list(k, v, as_usize)?,
                "model.weight_decay" => c.model.weight_decay = as_f64(k, v)?,
                "model.var_bound_coef" => c.model.var_bound_coef = as_f64(k, v)?,
                "model.batch_per_domain" => c.model.per_domain_batch = as_usize(k, v)?,
                "model.steps_per_epoch" => c.model.steps_per_epoch = Some(as_usize(k, v)?),
                "model.max_epochs" => c.model.max_epochs = as_usize(k, v)?,
                "model.patience" => c.model.patience = as_usize(k, v)?,
                "model.improvement_threshold" => c.model.improvement_threshold = as_f64(k, v)?,
                "model.lr" => c.model.lr = as_f64(k, v)?,
                "model.init_max_logvar" => c.model.ensemble.init_max_logvar = as_f64(k, v)?,
                "model.init_min_logvar" => c.model.ensemble.init_min_logvar = as_f64(k, v)?,
                "rollout.batch" => c.offline.rollout.batch = as_usize(k, v)?,
                "rollout.penalty_on_std" => c.offline.rollout.penalty_on_std = as_bool(k, v)?,
                "rollout.pool_capacity" => c.offline.rollout.pool_capacity = Some(as_usize(k, v)?),
                "rollout.start_dataset" => {
                    c.offline.rollout.start_source = StartSource::ExternalDataset(resolve(as_str(k, v)?))
                }
                "sac.gamma" => c.offline.sac.gamma = as_f64(k, v)?,
                "sac.tau" => c.offline.sac.tau = as_f64(k, v)?,
                "sac.hidden" => c.offline.sac.hidden = as_list(k, v, as_usize)?,
                "sac.actor_lr" => c.offline.sac.actor_lr = as_f64(k, v)?,
                "sac.critic_lr" => c.offline.sac.critic_lr = as_f64(k, v)?,
                "sac.alpha_lr" => c.offline.sac.alpha_lr = as_f64(k, v)?,
                "sac.init_alpha" => c.offline.sac.init_alpha = as_f64(k, v)?,
                "sac.target_entropy" => c.offline.sac.target_entropy = Some(as_f64(k, v)?),
                "sac.batch_size" => c.offline.sac.batch_size = as_usize(k, v)?,
                "sac.total_steps" => c.offline.total_steps = as_usize(k, v)?,
                "sac.updates_per_epoch" => c.offline.updates_per_epoch = as_usize(k, v)?,
                "sac.real_fraction" => c.offline.real_fraction = as_f64(k, v)?,
                "sac.log_every" => c.offline.log_every = as_usize(k, v)?,
                "sac.log_eval_episodes" => c.offline.eval_episodes = as_usize(k, v)?,
                "sac.model_return_episodes" => c.offline.model_return_episodes = as_usize(k, v)?,
                "sac.q_degen_threshold" => c.offline.q_degen_threshold = as_f64(k, v)?,
                "eval.episodes" => c.eval_episodes = as_usize(k, v)?,
                "sweep.beta" => c.grid.beta = as_list(k, v, as_f64)?,
                "sweep.lambda" => c.grid.lambda = as_list(k, v, as_f64)?,
                "sweep.h" => c.grid.horizon = as_list(k, v, as_usize)?,
                "sweep.sigma" => c.grid.sigma = as_list(k, v, as_f64)?,
                "analysis.pca_every" => c.analysis.pca_every = as_usize(k, v)?,
                "analysis.pca_samples" => c.analysis.pca_samples = as_usize(k, v)?,
                "analysis.degenerate_threshold" => c.analysis.degenerate_threshold = as_f64(k, v)?,
                "analysis.marks" => c.analysis.marks = as_list(k, v, as_usize)?,
                "analysis.degenerate_rollouts" => c.analysis.degenerate_rollouts = as_usize(k, v)?,
                _ => unreachable!("key list and match arms out of sync: {k}"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| invalid("env", e.to_string()))?;
        if let RosterSource::File(p) = &self.roster {
            if !p.exists() {
                return Err(invalid("roster", format!("{} does not exist", p.display())));
            }
        }
        if let StartSource::ExternalDataset(p) = &self.offline.rollout.start_source {
            if !p.exists() {
                return Err(invalid("rollout.start_dataset", format!("{} does not exist", p.display())));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        if self.data.records_per_demo == 0 || self.data.heldout_records == 0 {
            return Err(invalid("data.records_per_demo", "record counts must be positive"));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 0.5) {
            return Err(invalid("data.holdout_fraction", "must lie in (0, 0.5)"));
        }
        if self.eval_episodes == 0 {
            return Err(invalid("eval.episodes", "must be positive"));
        }
        for (k, g) in [("sweep.beta", &self.grid.beta), ("sweep.lambda", &self.grid.lambda), ("sweep.sigma", &self.grid.sigma)] {
            if g.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(invalid(k, "values must be finite and non-negative"));
            }
        }
        if self.grid.horizon.contains(&0) {
            return Err(invalid("sweep.h", "rollout lengths must be at least 1"));
        }
        if self.analysis.marks.is_empty() {
            return Err(invalid("analysis.marks", "list must not be empty"));
        }
        let mut probe = self.model.clone();
        probe.beta = self.grid.beta[0];
        probe.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.offline.sac.validate().map_err(|e| invalid("sac", e.to_string()))?;
        Ok(())
    }

    pub fn roster_specs(&self) -> Result<Vec<DemonstratorSpec>, ConfigError> {
        match &self.roster {
            RosterSource::Builtin(kind) => Ok(crate::envs::builtin_roster(self.env.kind, *kind)),
            RosterSource::File(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                serde_json::from_str(&text).map_err(|e| invalid("roster", format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn roster_label(&self) -> String {
        match &self.roster {
            RosterSource::Builtin(k) => format!("{k:?}").to_lowercase(),
            RosterSource::File(p) => p.file_name().map_or_else(|| "custom".into(), |f| f.to_string_lossy().into_owned()),
        }
    }

    /// Model training settings for one `β` and seed.
    pub fn model_config(&self, beta: f64, seed: u64) -> RexTrainConfig {
        RexTrainConfig { beta, seed, ..self.model.clone() }
    }

    /// Offline SAC settings for one cell and seed.
    pub fn offline_config(&self, cell: &SweepCell, seed: u64) -> OfflineConfig {
        let mut o = self.offline.clone();
        o.rollout.lambda = cell.lambda;
        o.rollout.horizon = cell.horizon;
        o.rollout.start_noise = cell.sigma;
        o.pool_sample_every = self.analysis.pca_every;
        o.pool_sample_size = self.analysis.pca_samples;
        o.seed = seed;
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse_str(text, Path::new("."))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("env = \"point_mass_2d\"\nroster = \"novice\"\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(c, d);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.offline.sac.gamma, 0.99);
    }

    #[test]
    fn grids_and_sections() {
        let c = parse(
            "# comment\nenv = \"pendulum\"\nsweep.beta = [0, 5, 10, 20]\nsweep.λ = [0, 1, 5]\nsweep.h = [5, 10]\n[sac]\ngamma = 0.95\n",
        )
        .unwrap();
        assert_eq!(c.grid.beta, vec![0.0, 5.0, 10.0, 20.0]);
        assert_eq!(c.grid.lambda, vec![0.0, 1.0, 5.0]);
        assert_eq!(c.grid.cells().len(), 4 * 3 * 2);
        assert_eq!(c.offline.sac.gamma, 0.95);
        assert_eq!(c.env.d_s, 3);
    }

    #[test]
    fn misspelled_lambda_suggests() {
        let e = parse("sweep.lamda = [1]\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("sweep.lambda") && msg.contains('λ'), "{msg}");
        let e = parse("lamda = 1\n").unwrap_err().to_string();
        assert!(e.contains("lambda") && e.contains('λ'), "{e}");
    }

    #[test]
    fn type_and_value_errors_name_the_key() {
        let e = parse("model.members = \"seven\"\n").unwrap_err().to_string();
        assert!(e.starts_with("model.members"), "{e}");
        let e = parse("seeds = [1, 1]\n").unwrap_err().to_string();
        assert!(e.starts_with("seeds"), "{e}");
        let e = parse("sweep.beta = []\n").unwrap_err().to_string();
        assert!(e.starts_with("sweep.beta"), "{e}");
        let e = parse("roster = \"missing.json\"\n").unwrap_err().to_string();
        assert!(e.starts_with("roster"), "{e}");
    }

    #[test]
    fn roster_file() {
        let dir = tempfile::tempdir().unwrap();
        let specs = crate::envs::builtin_roster(crate::envs::EnvKind::PointMass2d, RosterKind::Mixed);
        std::fs::write(dir.path().join("r.json"), serde_json::to_string(&specs).unwrap()).unwrap();
        let c = RunConfig::parse_str("roster = \"r.json\"\n", dir.path()).unwrap();
        assert_eq!(c.roster_specs().unwrap(), specs);
        assert_eq!(c.roster_label(), "r.json");
    }
}
