//! Stage executor for the six-stage workflow
//! `gen-data → train-model → eval-model → train-policy → eval-policy → analyze`.
//!
//! Output layout under the output root:
//!
//! ```text
//! data/                                   shared demonstrator data
//! model/beta=<β>/seed=<s>/                ensemble + evaluation
//! policy/beta=<β>,lambda=<λ>,h=<h>,sigma=<σ>/seed=<s>/
//! report/
//! ```
//!
//! Every job writes `manifest.<stage>.json` next to its artifacts. A job whose
//! config hash matches an intact `ok` manifest is skipped as cached.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{
    self, correlation_report, detect_degenerate_rewards, emit_report, fit_pca, policy_cells, project, ModelEvalRow,
    PcaSummary, PolicyEvalRow, Report, PCA_CAVEAT,
};
use crate::config::{ConfigError, RunConfig, SweepCell};
use crate::datasets::{MultiDemoDataset, SplitSpec, DATASET_FORMAT};
use crate::envmodel::{evaluate_model, train_ensemble, GaussianEnsemble, ModelEvalReport, ENSEMBLE_FORMAT};
use crate::envs::{behavioral_returns, generate_multi_demo_dataset, heldout_roster};
use crate::error::DimorlError;
use crate::nn::Matrix;
use crate::rollout::{generate_rollouts, sample_starts, RolloutConfig, StartSource, UniformPolicy};
use crate::sac::{evaluate_policy, mean_std, train_offline, PolicyLogRow, PoolSnapshot, SacAgent, POLICY_FORMAT};
use crate::seeding::{derive_seed, rng_from, tag};

pub const MANIFEST_FORMAT: &str = "dimorl-manifest-v1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Recorded in every report: pool-projection runs use the same model
/// training budget as all other runs.
pub const EXTRA_EPOCH_NOTE: &str = "Environment models used for the pool projection get the same training budget as every other run; no additional training epoch is applied.";

const TRAIN_DATA: &str = "train.jsonl";
const BEHAVIORAL: &str = "behavioral.json";
const ENSEMBLE: &str = "ensemble.json";
const MODEL_EVAL: &str = "model_eval.json";
const POLICY: &str = "policy.json";
const POLICY_SUMMARY: &str = "train_summary.json";
const POOL_SNAPSHOTS: &str = "pool_snapshots.json";
const POLICY_EVAL: &str = "policy_eval.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainModel,
    EvalModel,
    TrainPolicy,
    EvalPolicy,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::GenData, Stage::TrainModel, Stage::EvalModel, Stage::TrainPolicy, Stage::EvalPolicy, Stage::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainModel => "train-model",
            Stage::EvalModel => "eval-model",
            Stage::TrainPolicy => "train-policy",
            Stage::EvalPolicy => "eval-policy",
            Stage::Analyze => "analyze",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: Stage,
    pub config_hash: String,
    pub version: String,
    pub wall_time_s: f64,
    /// `ok` or `failed`.
    pub status: String,
    pub message: Option<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "message")]
pub enum JobStatus {
    Ran,
    Cached,
    Failed(String),
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobStatus::Ran => f.write_str("ok"),
            JobStatus::Cached => f.write_str("cached"),
            JobStatus::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobOutcome {
    /// Job directory relative to the output root.
    pub label: String,
    pub status: JobStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub jobs: Vec<JobOutcome>,
    /// Set by `analyze` when the report shows failed runs, degenerate Q
    /// epochs or reward spikes past the threshold.
    pub degenerate: bool,
}

impl StageSummary {
    pub fn failed(&self) -> usize {
        self.jobs.iter().filter(|j| matches!(j.status, JobStatus::Failed(_))).count()
    }
}

/// Restricts the sweep to matching cells; unset components match anything.
/// Parsed from `β=20,λ=1,h=5,σ=0` (ASCII `beta`, `lambda`, `sigma` also work).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellFilter {
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub horizon: Option<usize>,
    pub sigma: Option<f64>,
}

impl CellFilter {
    pub fn matches(&self, c: &SweepCell) -> bool {
        self.beta.is_none_or(|b| b == c.beta)
            && self.lambda.is_none_or(|l| l == c.lambda)
            && self.horizon.is_none_or(|h| h == c.horizon)
            && self.sigma.is_none_or(|s| s == c.sigma)
    }
}

impl FromStr for CellFilter {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let bad = |msg: String| ConfigError::Invalid { key: "--cell".into(), msg };
        let mut f = CellFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{part}'")))?;
            let num = || v.trim().parse::<f64>().map_err(|_| bad(format!("'{v}' is not a number")));
            match k.trim() {
                "β" | "beta" => f.beta = Some(num()?),
                "λ" | "lambda" => f.lambda = Some(num()?),
                "σ" | "sigma" => f.sigma = Some(num()?),
                "h" | "horizon" => {
                    f.horizon = Some(v.trim().parse().map_err(|_| bad(format!("'{v}' is not a rollout length")))?)
                }
                other => return Err(bad(format!("unknown cell component '{other}'"))),
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehavioralStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainSummary {
    pub erm_epochs: usize,
    pub rex_epochs: usize,
    pub steps_per_epoch: usize,
    pub elites: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainSummary {
    pub epochs: usize,
    pub degenerate_epochs: usize,
    pub last: Option<PolicyLogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalRecord {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
    pub degenerate_epochs: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DimorlError + '_ {
    move |source| DimorlError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String, DimorlError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DimorlError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| DimorlError::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DimorlError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DimorlError::Format { path: path.to_path_buf(), msg: e.to_string() })
}

fn write_text(path: &Path, text: &str) -> Result<(), DimorlError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Run `f` over `items` on up to `jobs` scoped threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot poisoned").expect("job did not run")).collect()
}

/// A completed-or-not upstream artifact: path and content hash.
type Found = Option<(PathBuf, String)>;
/// `(β, seed, ensemble, model eval)`.
type ModelRun = (f64, u64, Found, Found);
/// `(cell, seed, pool snapshots, policy eval)`.
type PolicyRun = (SweepCell, u64, Found, Found);

pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    jobs: usize,
    seeds: Vec<u64>,
    filter: CellFilter,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Self { out: config.out.clone(), seeds: config.seeds.clone(), config, jobs: 1, filter: CellFilter::default() }
    }

    pub fn with_out(mut self, out: PathBuf) -> Self {
        self.out = out;
        self
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    pub fn with_filter(mut self, filter: CellFilter) -> Self {
        self.filter = filter;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn model_dir(&self, beta: f64, seed: u64) -> PathBuf {
        self.out.join("model").join(format!("beta={beta}")).join(format!("seed={seed}"))
    }

    pub fn policy_dir(&self, cell: &SweepCell, seed: u64) -> PathBuf {
        self.out.join("policy").join(cell.label()).join(format!("seed={seed}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    fn betas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for c in self.cells() {
            if !out.contains(&c.beta) {
                out.push(c.beta);
            }
        }
        out
    }

    fn cells(&self) -> Vec<SweepCell> {
        self.config.grid.cells().into_iter().filter(|c| self.filter.matches(c)).collect()
    }

    fn model_jobs(&self) -> Vec<(f64, u64)> {
        self.betas().into_iter().flat_map(|b| self.seeds.iter().map(move |&s| (b, s))).collect()
    }

    fn policy_jobs(&self) -> Vec<(SweepCell, u64)> {
        self.cells().into_iter().flat_map(|c| self.seeds.iter().map(move |&s| (c, s))).collect()
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.out).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn manifest_path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("manifest.{stage}.json"))
    }

    fn intact(&self, m: &Manifest) -> bool {
        m.artifacts.iter().all(|a| sha256_file(&self.out.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }

    /// Path and content hash of `file` as recorded by an `ok` producer manifest.
    fn require(
        &self,
        stage: Stage,
        producer: Stage,
        dir: &Path,
        file: &str,
        format: &'static str,
    ) -> Result<(PathBuf, String), DimorlError> {
        let path = dir.join(file);
        let missing = || DimorlError::MissingArtifact { stage, format, producer, path: path.clone() };
        let m: Manifest = read_json(&Self::manifest_path(dir, producer)).map_err(|_| missing())?;
        if m.status != "ok" {
            return Err(DimorlError::UpstreamFailed { producer, path: dir.to_path_buf() });
        }
        let rel = self.relative(&path);
        let entry = m.artifacts.iter().find(|a| a.path == rel).ok_or_else(missing)?;
        if !path.exists() {
            return Err(missing());
        }
        Ok((path, entry.sha256.clone()))
    }

    /// Like `require` but absent or failed upstream gives `None`.
    fn optional(&self, producer: Stage, dir: &Path, file: &str) -> Found {
        self.require(Stage::Analyze, producer, dir, file, "").ok()
    }

    fn run_job(
        &self,
        stage: Stage,
        dir: &Path,
        key: &serde_json::Value,
        body: impl FnOnce(&Path) -> Result<Vec<PathBuf>, DimorlError>,
    ) -> Result<JobOutcome, DimorlError> {
        let config_hash = sha256_hex(key.to_string().as_bytes());
        let manifest_path = Self::manifest_path(dir, stage);
        let label = self.relative(dir);
        if let Ok(m) = read_json::<Manifest>(&manifest_path) {
            if m.config_hash == config_hash && m.status == "ok" && self.intact(&m) {
                return Ok(JobOutcome { label, status: JobStatus::Cached });
            }
        }
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let start = Instant::now();
        let (status, message, artifacts) = match body(dir) {
            Ok(paths) => {
                let mut entries = Vec::with_capacity(paths.len());
                for p in &paths {
                    entries.push(ArtifactEntry { path: self.relative(p), sha256: sha256_file(p)? });
                }
                (JobStatus::Ran, None, entries)
            }
            Err(e) if e.is_numeric() || matches!(e, DimorlError::UpstreamFailed { .. }) => {
                (JobStatus::Failed(e.to_string()), Some(e.to_string()), vec![])
            }
            Err(e) => return Err(e),
        };
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            stage,
            config_hash,
            version: VERSION.into(),
            wall_time_s: start.elapsed().as_secs_f64(),
            status: if message.is_none() { "ok".into() } else { "failed".into() },
            message,
            artifacts,
        };
        write_json(&manifest_path, &manifest)?;
        Ok(JobOutcome { label, status })
    }

    fn summarize(stage: Stage, results: Vec<Result<JobOutcome, DimorlError>>) -> Result<StageSummary, DimorlError> {
        let jobs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(StageSummary { stage, jobs, degenerate: false })
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageSummary, DimorlError> {
        match stage {
            Stage::GenData => Self::summarize(stage, vec![self.gen_data()]),
            Stage::TrainModel => {
                Self::summarize(stage, parallel_map(&self.model_jobs(), self.jobs, |&(b, s)| self.train_model(b, s)))
            }
            Stage::EvalModel => {
                Self::summarize(stage, parallel_map(&self.model_jobs(), self.jobs, |&(b, s)| self.eval_model(b, s)))
            }
            Stage::TrainPolicy => {
                Self::summarize(stage, parallel_map(&self.policy_jobs(), self.jobs, |(c, s)| self.train_policy(c, *s)))
            }
            Stage::EvalPolicy => {
                Self::summarize(stage, parallel_map(&self.policy_jobs(), self.jobs, |(c, s)| self.eval_policy(c, *s)))
            }
            Stage::Analyze => {
                let job = self.analyze()?;
                let report = analysis::load_report(&self.report_dir().join("report.json"))?;
                Ok(StageSummary { stage, jobs: vec![job], degenerate: report_is_degenerate(&report) })
            }
        }
    }

    pub fn run_all(&self) -> Result<Vec<StageSummary>, DimorlError> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn gen_data(&self) -> Result<JobOutcome, DimorlError> {
        let c = &self.config;
        let roster = c.roster_specs()?;
        let heldout = heldout_roster(c.env.kind);
        let key = json!({ "env": c.env, "roster": roster, "heldout_roster": heldout, "data": c.data });
        let dir = self.data_dir();
        self.run_job(Stage::GenData, &dir, &key, |dir| {
            let ds = generate_multi_demo_dataset(&c.env, &roster, c.data.records_per_demo, c.data.seed)?
                .resplit(SplitSpec::Holdout { fraction: c.data.holdout_fraction, seed: c.data.seed })?;
            let mut paths = vec![dir.join(TRAIN_DATA)];
            ds.save(&paths[0])?;
            let behavioral: BTreeMap<u32, BehavioralStats> = behavioral_returns(&ds, c.env.horizon)
                .into_iter()
                .filter(|(_, r)| !r.is_empty())
                .map(|(id, r)| {
                    let (mean, std) = mean_std(&r);
                    (id, BehavioralStats { mean, std, episodes: r.len() })
                })
                .collect();
            paths.push(dir.join(BEHAVIORAL));
            write_json(&paths[1], &behavioral)?;
            let heldout_seed = derive_seed(c.data.seed, &[tag("heldout-data")]);
            for d in &heldout {
                let hds = generate_multi_demo_dataset(&c.env, std::slice::from_ref(d), c.data.heldout_records, heldout_seed)?;
                let p = dir.join(format!("heldout_{}.jsonl", d.id));
                hds.save(&p)?;
                paths.push(p);
            }
            Ok(paths)
        })
    }

    fn train_model(&self, beta: f64, seed: u64) -> Result<JobOutcome, DimorlError> {
        let (data, data_hash) =
            self.require(Stage::TrainModel, Stage::GenData, &self.data_dir(), TRAIN_DATA, DATASET_FORMAT)?;
        let cfg = self.config.model_config(beta, seed);
        let key = json!({ "model": cfg, "data": data_hash });
        self.run_job(Stage::TrainModel, &self.model_dir(beta, seed), &key, |dir| {
            let ds = MultiDemoDataset::load(&data)?;
            let (ens, log) = train_ensemble(&ds, &cfg)?;
            let paths = [dir.join(ENSEMBLE), dir.join("train_log.csv"), dir.join("train_summary.json")];
            ens.save(&paths[0])?;
            write_text(&paths[1], &log.to_csv())?;
            let summary = ModelTrainSummary {
                erm_epochs: log.erm_epochs,
                rex_epochs: log.rex_epochs,
                steps_per_epoch: log.steps_per_epoch,
                elites: ens.elites.clone(),
            };
            write_json(&paths[2], &summary)?;
            Ok(paths.to_vec())
        })
    }

    fn heldout_paths(&self, stage: Stage) -> Result<Vec<(String, PathBuf, String)>, DimorlError> {
        heldout_roster(self.config.env.kind)
            .iter()
            .map(|d| {
                let name = format!("heldout_{}.jsonl", d.id);
                let (p, h) = self.require(stage, Stage::GenData, &self.data_dir(), &name, DATASET_FORMAT)?;
                Ok((format!("demonstrator_{}", d.id), p, h))
            })
            .collect()
    }

    fn eval_model(&self, beta: f64, seed: u64) -> Result<JobOutcome, DimorlError> {
        let stage = Stage::EvalModel;
        let (data, data_hash) = self.require(stage, Stage::GenData, &self.data_dir(), TRAIN_DATA, DATASET_FORMAT)?;
        let heldout = self.heldout_paths(stage)?;
        let dir = self.model_dir(beta, seed);
        let (ens_path, ens_hash) = self.require(stage, Stage::TrainModel, &dir, ENSEMBLE, ENSEMBLE_FORMAT)?;
        let key = json!({
            "ensemble": ens_hash,
            "train": data_hash,
            "heldout": heldout.iter().map(|h| &h.2).collect::<Vec<_>>(),
        });
        self.run_job(stage, &dir, &key, |dir| {
            let ens = GaussianEnsemble::load(&ens_path)?;
            let train = MultiDemoDataset::load(&data)?;
            let sets = heldout
                .iter()
                .map(|(name, p, _)| Ok((name.clone(), MultiDemoDataset::load(p)?)))
                .collect::<Result<Vec<_>, DimorlError>>()?;
            let refs: Vec<(String, &MultiDemoDataset)> = sets.iter().map(|(n, d)| (n.clone(), d)).collect();
            let report = evaluate_model(&ens, &refs, Some(&train))?;
            let path = dir.join(MODEL_EVAL);
            write_json(&path, &report)?;
            Ok(vec![path])
        })
    }

    fn train_policy(&self, cell: &SweepCell, seed: u64) -> Result<JobOutcome, DimorlError> {
        let stage = Stage::TrainPolicy;
        let (data, data_hash) = self.require(stage, Stage::GenData, &self.data_dir(), TRAIN_DATA, DATASET_FORMAT)?;
        let (ens_path, ens_hash) =
            self.require(stage, Stage::TrainModel, &self.model_dir(cell.beta, seed), ENSEMBLE, ENSEMBLE_FORMAT)?;
        let cfg = self.config.offline_config(cell, seed);
        let start_hash = match &cfg.rollout.start_source {
            StartSource::ExternalDataset(p) => Some(sha256_file(p)?),
            StartSource::TrainDataset => None,
        };
        let key = json!({
            "env": self.config.env,
            "offline": cfg,
            "ensemble": ens_hash,
            "data": data_hash,
            "start_data": start_hash,
        });
        self.run_job(stage, &self.policy_dir(cell, seed), &key, |dir| {
            let ens = GaussianEnsemble::load(&ens_path)?;
            let ds = MultiDemoDataset::load(&data)?;
            let starts = match &cfg.rollout.start_source {
                StartSource::ExternalDataset(p) => Some(MultiDemoDataset::load(p)?),
                StartSource::TrainDataset => None,
            };
            let (agent, log) = train_offline(&ens, &ds, &self.config.env, &cfg, starts.as_ref())?;
            let paths = [
                dir.join(POLICY),
                dir.join("train_log.csv"),
                dir.join("rollout_log.csv"),
                dir.join(POOL_SNAPSHOTS),
                dir.join(POLICY_SUMMARY),
            ];
            agent.save(&paths[0])?;
            write_text(&paths[1], &log.to_csv())?;
            write_text(&paths[2], &log.rollout_csv())?;
            write_json(&paths[3], &log.pool_snapshots)?;
            let summary = PolicyTrainSummary {
                epochs: cfg.epochs(),
                degenerate_epochs: log.rows.iter().filter(|r| r.degenerate).count(),
                last: log.rows.last().cloned(),
            };
            write_json(&paths[4], &summary)?;
            Ok(paths.to_vec())
        })
    }

    fn eval_policy(&self, cell: &SweepCell, seed: u64) -> Result<JobOutcome, DimorlError> {
        let stage = Stage::EvalPolicy;
        let dir = self.policy_dir(cell, seed);
        let (policy, policy_hash) = self.require(stage, Stage::TrainPolicy, &dir, POLICY, POLICY_FORMAT)?;
        let (summary, summary_hash) = self.require(stage, Stage::TrainPolicy, &dir, POLICY_SUMMARY, POLICY_FORMAT)?;
        let episodes = self.config.eval_episodes;
        let key = json!({ "env": self.config.env, "episodes": episodes, "policy": policy_hash, "summary": summary_hash });
        self.run_job(stage, &dir, &key, |dir| {
            let agent = SacAgent::load(&policy)?;
            let summary: PolicyTrainSummary = read_json(&summary)?;
            let r = evaluate_policy(&agent, &self.config.env, episodes, derive_seed(seed, &[tag("final-eval")]))?;
            let record =
                PolicyEvalRecord { mean: r.mean, std: r.std, returns: r.returns, degenerate_epochs: summary.degenerate_epochs };
            let path = dir.join(POLICY_EVAL);
            write_json(&path, &record)?;
            Ok(vec![path])
        })
    }

    fn analyze(&self) -> Result<JobOutcome, DimorlError> {
        let stage = Stage::Analyze;
        let data_dir = self.data_dir();
        let (data, data_hash) = self.require(stage, Stage::GenData, &data_dir, TRAIN_DATA, DATASET_FORMAT)?;
        let (behavioral, behavioral_hash) =
            self.require(stage, Stage::GenData, &data_dir, BEHAVIORAL, DATASET_FORMAT)?;

        let models: Vec<ModelRun> = self
            .model_jobs()
            .into_iter()
            .map(|(b, s)| {
                let dir = self.model_dir(b, s);
                (b, s, self.optional(Stage::TrainModel, &dir, ENSEMBLE), self.optional(Stage::EvalModel, &dir, MODEL_EVAL))
            })
            .collect();
        let policies: Vec<PolicyRun> = self
            .policy_jobs()
            .into_iter()
            .map(|(c, s)| {
                let dir = self.policy_dir(&c, s);
                (
                    c,
                    s,
                    self.optional(Stage::TrainPolicy, &dir, POOL_SNAPSHOTS),
                    self.optional(Stage::EvalPolicy, &dir, POLICY_EVAL),
                )
            })
            .collect();
        let hash_of = |x: &Option<(PathBuf, String)>| x.as_ref().map(|(_, h)| h.clone());
        let key = json!({
            "env": self.config.env,
            "roster": self.config.roster_label(),
            "seeds": self.seeds,
            "cells": self.cells(),
            "analysis": self.config.analysis,
            "data": [data_hash, behavioral_hash],
            "models": models.iter().map(|m| (m.0, m.1, hash_of(&m.2), hash_of(&m.3))).collect::<Vec<_>>(),
            "policies": policies.iter().map(|p| (p.0, p.1, hash_of(&p.2), hash_of(&p.3))).collect::<Vec<_>>(),
        });

        self.run_job(stage, &self.report_dir(), &key, |dir| {
            let cfg = &self.config;
            let train = MultiDemoDataset::load(&data)?;
            let behavioral: BTreeMap<u32, BehavioralStats> = read_json(&behavioral)?;
            let mut notes = vec![PCA_CAVEAT.to_string(), EXTRA_EPOCH_NOTE.to_string()];

            let mut model_eval = Vec::with_capacity(models.len());
            for (beta, seed, _, eval) in &models {
                let r: Option<ModelEvalReport> = eval.as_ref().map(|(p, _)| read_json(p)).transpose()?;
                if r.is_none() {
                    notes.push(format!("model beta={beta} seed={seed}: no evaluation"));
                }
                model_eval.push(ModelEvalRow {
                    beta: *beta,
                    seed: *seed,
                    average_ll: r.as_ref().map(|r| r.average_ll),
                    worst_ll: r.as_ref().map(|r| r.worst_ll),
                    average_mse: r.as_ref().map(|r| r.average_mse),
                    worst_mse: r.as_ref().map(|r| r.worst_mse),
                    risk_std: r.as_ref().map(|r| r.risk_variance.sqrt()),
                });
            }

            let mut policy_eval = Vec::with_capacity(policies.len());
            for (cell, seed, _, eval) in &policies {
                let r: Option<PolicyEvalRecord> = eval.as_ref().map(|(p, _)| read_json(p)).transpose()?;
                if r.is_none() {
                    notes.push(format!("policy {} seed={seed}: did not complete", cell.label()));
                }
                policy_eval.push(PolicyEvalRow {
                    beta: cell.beta,
                    lambda: cell.lambda,
                    horizon: cell.horizon,
                    sigma: cell.sigma,
                    seed: *seed,
                    mean_return: r.as_ref().map(|r| r.mean),
                    degenerate_epochs: r.as_ref().map(|r| r.degenerate_epochs),
                });
            }
            let cells = policy_cells(&policy_eval, self.seeds.len());

            let pairs: Vec<(f64, f64)> = policy_eval
                .iter()
                .filter_map(|p| {
                    let m = model_eval.iter().find(|m| m.beta == p.beta && m.seed == p.seed)?;
                    Some((m.average_ll?, p.mean_return?))
                })
                .collect();
            let correlation = match correlation_report(&pairs) {
                Ok(c) => Some(c),
                Err(e) => {
                    notes.push(format!("correlation skipped: {e}"));
                    None
                }
            };

            let pca = self.pool_projection(&train, &policies)?;
            let degenerate = self.degenerate_scan(&train, &models)?;

            let report = Report {
                version: VERSION.into(),
                env: cfg.env.name.clone(),
                roster: cfg.roster_label(),
                seeds: self.seeds.clone(),
                notes,
                demonstrators: behavioral.iter().map(|(id, b)| (*id, b.mean)).collect(),
                model_eval,
                policy_eval,
                policy_cells: cells,
                correlation,
                pca,
                degenerate,
            };
            emit_report(&report, dir)?;
            Ok(["report.json", "model_eval.csv", "policy_eval.csv", "pca_coords.csv", "degenerate_rewards.csv"]
                .iter()
                .map(|f| dir.join(f))
                .collect())
        })
    }

    /// Two-component PCA of standardized state-action pairs pooled over
    /// every snapshot of every completed policy run.
    fn pool_projection(
        &self,
        train: &MultiDemoDataset,
        policies: &[PolicyRun],
    ) -> Result<Option<PcaSummary>, DimorlError> {
        let norm = train.norm();
        let mut labels = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (cell, seed, snaps, _) in policies {
            let Some((path, _)) = snaps else { continue };
            let snaps: Vec<PoolSnapshot> = read_json(path)?;
            for snap in snaps {
                for sa in snap.state_actions {
                    rows.push(norm.normalize_input(&sa));
                    labels.push((format!("{}/seed={seed}", cell.label()), snap.step));
                }
            }
        }
        let k = 2.min(norm.input_mean.len());
        if rows.len() < k {
            return Ok(None);
        }
        let records = Matrix::from_rows(&rows);
        let proj = fit_pca(&records, k)?;
        let coords = project(&proj, &records)?;
        let coords = labels
            .into_iter()
            .enumerate()
            .map(|(i, (label, step))| (label, step, coords.get(i, 0), if k > 1 { coords.get(i, 1) } else { 0.0 }))
            .collect();
        Ok(Some(PcaSummary {
            explained_variance_ratio: proj.explained_variance_ratio.clone(),
            caveat: PCA_CAVEAT.into(),
            coords,
        }))
    }

    /// Raw model rewards of uniform-random rollouts in every trained model,
    /// scanned for magnitudes past the threshold.
    fn degenerate_scan(
        &self,
        train: &MultiDemoDataset,
        models: &[ModelRun],
    ) -> Result<Option<analysis::DegenerateReport>, DimorlError> {
        let a = &self.config.analysis;
        let env = &self.config.env;
        let horizon = a.marks.iter().copied().max().unwrap_or(1).max(1);
        let policy = UniformPolicy { low: env.action_low.clone(), high: env.action_high.clone() };
        let rollout = RolloutConfig { horizon, lambda: 0.0, batch: 1, ..RolloutConfig::default() };
        let mut trajectories = Vec::new();
        for (beta, seed, ens, _) in models {
            let Some((path, _)) = ens else { continue };
            let ens = GaussianEnsemble::load(path)?;
            let base = derive_seed(*seed, &[tag("degenerate-scan"), beta.to_bits()]);
            let starts = sample_starts(train, a.degenerate_rollouts, 0.0, &mut rng_from(base, &[tag("starts")]))?;
            for (i, s) in starts.iter().enumerate() {
                let (ts, _) = generate_rollouts(
                    &ens,
                    env,
                    &policy,
                    std::slice::from_ref(s),
                    &rollout,
                    derive_seed(base, &[i as u64]),
                )?;
                trajectories.push(ts.iter().map(|t| t.raw_reward).collect::<Vec<f64>>());
            }
        }
        if trajectories.is_empty() {
            return Ok(None);
        }
        Ok(Some(detect_degenerate_rewards(&trajectories, a.degenerate_threshold, &a.marks)))
    }
}

fn report_is_degenerate(r: &Report) -> bool {
    r.policy_eval.iter().any(|p| p.mean_return.is_none() || p.degenerate_epochs.is_some_and(|n| n > 0))
        || r.degenerate.as_ref().is_some_and(|d| d.exceed_count > 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_filter_parses_greek_and_ascii() {
        let f: CellFilter = "β=20,λ=1,h=5,σ=0.05".parse().unwrap();
        assert_eq!(f, CellFilter { beta: Some(20.0), lambda: Some(1.0), horizon: Some(5), sigma: Some(0.05) });
        let g: CellFilter = "beta=0".parse().unwrap();
        assert!(g.matches(&SweepCell { beta: 0.0, lambda: 5.0, horizon: 10, sigma: 0.1 }));
        assert!(!g.matches(&SweepCell { beta: 5.0, lambda: 5.0, horizon: 10, sigma: 0.1 }));
        assert!("gamma=1".parse::<CellFilter>().is_err());
        assert!("beta".parse::<CellFilter>().is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        let out = parallel_map(&items, 4, |x| x * x);
        assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!(serde_json::to_string(&Stage::TrainPolicy).unwrap(), "\"train-policy\"");
    }
}
