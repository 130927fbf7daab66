//! Probabilistic ensemble environment model.
//!
//! Each member maps normalized `(s, a)` to a diagonal Gaussian over the
//! normalized target `(s' − s, r)`. One network produces both heads: the first
//! `d_s + 1` outputs are the mean, the rest the raw log-variance. Raw
//! log-variances are squashed against per-member learnable bounds:
//!
//! ```text
//! a  = max − softplus(max − raw)
//! b  = min + softplus(a − min)
//! lv = clamp(b, min, max)
//! ```
//!
//! The softplus pair alone can overshoot `max` by `ln(1 + e^{-(max − min)})`;
//! the final clamp makes the bound exact.

mod synthetic;
mod train;

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{MultiDemoDataset, NormStats, TransitionRecord};
use crate::nn::{softplus, sigmoid, Activation, Matrix, MlpCheckpoint, MlpParams, NnError};
use crate::seeding::Rng;

pub use synthetic::{heteroskedastic_dataset, SyntheticDomain};
pub use train::{
    member_loss_and_grad, train_ensemble, train_ensemble_with, vrex_combine, vrex_risk_weights, EpochLog, LossTerms, MemberGrads,
    ModelBatch, Objective, PatienceTracker, Phase, RexTrainConfig, TrainLog,
};

pub const ENSEMBLE_FORMAT: &str = "dimorl-ens-v1";
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("member {member}: {source}")]
    Member { member: usize, source: NnError },
    #[error("member index {0} out of range")]
    BadMember(usize),
    #[error("non-positive variance")]
    NonPositiveVariance,
    #[error("empty batch")]
    EmptyBatch,
    #[error("no per-domain risks to combine")]
    NoDomains,
    #[error("requested {k} elites from an ensemble of {n}")]
    TooManyElites { k: usize, n: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in {phase} epoch {epoch}, member {member}")]
    NonFiniteLoss { phase: &'static str, epoch: usize, member: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no evaluation datasets")]
    NoEvalData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Dataset(#[from] crate::datasets::DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_max_logvar: f64,
    pub init_min_logvar: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 7,
            elites: 5,
            hidden: vec![64, 64],
            activation: Activation::Silu,
            init_max_logvar: 0.5,
            init_min_logvar: -10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMember {
    pub net: MlpParams,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
}

/// Bounded log-variance and its partials w.r.t. `(raw, max, min)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundedLogVar {
    pub value: f64,
    pub d_raw: f64,
    pub d_max: f64,
    pub d_min: f64,
}

pub fn bound_logvar(raw: f64, max: f64, min: f64) -> BoundedLogVar {
    let a = max - softplus(max - raw);
    let da_draw = sigmoid(max - raw);
    let da_dmax = 1.0 - da_draw;
    let b = min + softplus(a - min);
    let db_da = sigmoid(a - min);
    let db_dmin = 1.0 - db_da;
    if b >= max {
        BoundedLogVar { value: max, d_raw: 0.0, d_max: 1.0, d_min: 0.0 }
    } else if b <= min {
        BoundedLogVar { value: min, d_raw: 0.0, d_max: 0.0, d_min: 1.0 }
    } else {
        BoundedLogVar { value: b, d_raw: db_da * da_draw, d_max: db_da * da_dmax, d_min: db_dmin }
    }
}

/// Diagonal Gaussian over `(s', r)` in original units, plus the bounded
/// log-variance in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Row-wise batched predictions (rows = samples, columns = `d_s + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrediction {
    pub mean: Matrix,
    pub var: Matrix,
    pub log_var: Matrix,
}

impl BatchPrediction {
    pub fn row(&self, i: usize) -> GaussianPrediction {
        GaussianPrediction {
            mean: self.mean.row(i).to_vec(),
            var: self.var.row(i).to_vec(),
            log_var: self.log_var.row(i).to_vec(),
        }
    }
}

impl GaussianPrediction {
    /// Draw `(s', r)`.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEnsemble {
    pub env_name: String,
    pub d_s: usize,
    pub d_a: usize,
    pub members: Vec<GaussianMember>,
    /// Member indices ranked best-first by held-out NLL.
    pub elites: Vec<usize>,
    pub norm: NormStats,
}

/// Per-dimension Gaussian NLL in normalized units and its partials w.r.t. the
/// mean and the (already bounded) log-variance.
#[inline]
pub(crate) fn gaussian_nll(y: f64, mean: f64, log_var: f64) -> (f64, f64, f64) {
    let inv = (-log_var).exp();
    let diff = mean - y;
    let nll = 0.5 * (diff * diff * inv + log_var + LN_2PI);
    (nll, diff * inv, 0.5 * (1.0 - diff * diff * inv))
}

impl GaussianEnsemble {
    pub fn init(
        env_name: &str,
        d_s: usize,
        d_a: usize,
        norm: NormStats,
        config: &EnsembleConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if config.members == 0 {
            return Err(ModelError::InvalidConfig("ensemble needs at least one member".into()));
        }
        if config.elites == 0 || config.elites > config.members {
            return Err(ModelError::TooManyElites { k: config.elites, n: config.members });
        }
        let d_out = d_s + 1;
        let mut sizes = vec![d_s + d_a];
        sizes.extend(&config.hidden);
        sizes.push(2 * d_out);
        let members = (0..config.members)
            .map(|i| {
                let mut rng = crate::seeding::rng_from(seed, &[crate::seeding::tag("init"), i as u64]);
                let net = MlpParams::init(&sizes, config.activation, &mut rng)
                    .map_err(|source| ModelError::Member { member: i, source })?;
                Ok(GaussianMember {
                    net,
                    max_logvar: vec![config.init_max_logvar; d_out],
                    min_logvar: vec![config.init_min_logvar; d_out],
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            env_name: env_name.to_string(),
            d_s,
            d_a,
            members,
            elites: (0..config.elites).collect(),
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn target_dim(&self) -> usize {
        self.d_s + 1
    }

    /// Normalized model inputs for rows of states and actions.
    pub fn model_inputs(&self, states: &Matrix, actions: &Matrix) -> Matrix {
        let n = states.rows();
        let d_in = self.d_s + self.d_a;
        let mut out = Matrix::zeros(n, d_in);
        for i in 0..n {
            let row = out.row_mut(i);
            for (j, v) in states.row(i).iter().chain(actions.row(i)).enumerate() {
                row[j] = (v - self.norm.input_mean[j]) / self.norm.input_std[j];
            }
        }
        out
    }

    /// Normalized inputs and targets for a set of records.
    pub fn records_to_batch<'a>(&self, records: impl IntoIterator<Item = &'a TransitionRecord>) -> (Matrix, Matrix) {
        let d_in = self.d_s + self.d_a;
        let d_out = self.target_dim();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        let mut n = 0;
        for r in records {
            for (j, v) in r.state.iter().chain(&r.action).enumerate() {
                xs.push((v - self.norm.input_mean[j]) / self.norm.input_std[j]);
            }
            for (j, v) in r.target().into_iter().enumerate() {
                ys.push((v - self.norm.target_mean[j]) / self.norm.target_std[j]);
            }
            n += 1;
        }
        (Matrix::from_vec(n, d_in, xs), Matrix::from_vec(n, d_out, ys))
    }

    /// Normalized mean and bounded log-variance for normalized inputs.
    pub(crate) fn raw_heads(&self, member: usize, inputs: &Matrix) -> Result<(Matrix, Matrix), ModelError> {
        let m = self.members.get(member).ok_or(ModelError::BadMember(member))?;
        let out = m.net.forward(inputs).map_err(|source| ModelError::Member { member, source })?;
        let d = self.target_dim();
        let mean = out.columns(0, d);
        let mut lv = out.columns(d, 2 * d);
        for i in 0..lv.rows() {
            for (j, x) in lv.row_mut(i).iter_mut().enumerate() {
                *x = bound_logvar(*x, m.max_logvar[j], m.min_logvar[j]).value;
            }
        }
        Ok((mean, lv))
    }

    /// Predictions of one member for rows of `(state, action)`.
    pub fn predict_batch(&self, member: usize, states: &Matrix, actions: &Matrix) -> Result<BatchPrediction, ModelError> {
        if states.cols() != self.d_s || actions.cols() != self.d_a || states.rows() != actions.rows() {
            return Err(ModelError::Dimension(format!(
                "expected states n×{} and actions n×{}, got {}×{} and {}×{}",
                self.d_s,
                self.d_a,
                states.rows(),
                states.cols(),
                actions.rows(),
                actions.cols()
            )));
        }
        let inputs = self.model_inputs(states, actions);
        let (mean_n, log_var) = self.raw_heads(member, &inputs)?;
        let d = self.target_dim();
        let n = states.rows();
        let mut mean = Matrix::zeros(n, d);
        let mut var = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let sd = self.norm.target_std[j];
                let mut mu = mean_n.get(i, j) * sd + self.norm.target_mean[j];
                if j < self.d_s {
                    mu += states.get(i, j);
                }
                mean.set(i, j, mu);
                var.set(i, j, log_var.get(i, j).exp() * sd * sd);
            }
        }
        if !mean.is_finite() || !var.is_finite() {
            return Err(ModelError::Member { member, source: NnError::NonFiniteOutput });
        }
        Ok(BatchPrediction { mean, var, log_var })
    }

    pub fn predict(&self, member: usize, state: &[f64], action: &[f64]) -> Result<GaussianPrediction, ModelError> {
        if state.iter().chain(action).any(|x| !x.is_finite()) {
            return Err(ModelError::Member { member, source: NnError::NonFiniteInput });
        }
        Ok(self
            .predict_batch(member, &Matrix::row_vector(state), &Matrix::row_vector(action))?
            .row(0))
    }

    /// Mean NLL (normalized target space) of one member over records.
    pub fn nll(&self, member: usize, records: &[&TransitionRecord]) -> Result<f64, ModelError> {
        if records.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let (x, y) = self.records_to_batch(records.iter().copied());
        self.nll_normalized(member, &x, &y)
    }

    pub(crate) fn nll_normalized(&self, member: usize, inputs: &Matrix, targets: &Matrix) -> Result<f64, ModelError> {
        if inputs.rows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let (mean, lv) = self.raw_heads(member, inputs)?;
        let mut total = 0.0;
        for ((m, l), y) in mean.as_slice().iter().zip(lv.as_slice()).zip(targets.as_slice()) {
            if !l.exp().is_normal() {
                return Err(ModelError::NonPositiveVariance);
            }
            total += gaussian_nll(*y, *m, *l).0;
        }
        Ok(total / inputs.rows() as f64)
    }

    /// Pick an elite uniformly.
    pub fn random_elite(&self, rng: &mut Rng) -> usize {
        self.elites[rng.random_range(0..self.elites.len())]
    }

    pub fn to_checkpoint(&self) -> EnsembleCheckpoint {
        EnsembleCheckpoint {
            format: ENSEMBLE_FORMAT.into(),
            env_name: self.env_name.clone(),
            d_s: self.d_s,
            d_a: self.d_a,
            members: self
                .members
                .iter()
                .map(|m| MemberCheckpoint {
                    net: m.net.to_checkpoint(),
                    max_logvar: m.max_logvar.clone(),
                    min_logvar: m.min_logvar.clone(),
                })
                .collect(),
            elites: self.elites.clone(),
            norm: self.norm.clone(),
        }
    }

    pub fn from_checkpoint(ck: EnsembleCheckpoint) -> Result<Self, ModelError> {
        if ck.format != ENSEMBLE_FORMAT {
            return Err(ModelError::Checkpoint(format!("expected {ENSEMBLE_FORMAT}, found {}", ck.format)));
        }
        let d_out = ck.d_s + 1;
        let members = ck
            .members
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let net = MlpParams::from_checkpoint(m.net).map_err(|source| ModelError::Member { member: i, source })?;
                if net.input_dim() != ck.d_s + ck.d_a
                    || net.output_dim() != 2 * d_out
                    || m.max_logvar.len() != d_out
                    || m.min_logvar.len() != d_out
                {
                    return Err(ModelError::Checkpoint(format!("member {i} has inconsistent shapes")));
                }
                Ok(GaussianMember { net, max_logvar: m.max_logvar, min_logvar: m.min_logvar })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if members.is_empty() || ck.elites.is_empty() || ck.elites.iter().any(|&e| e >= members.len()) {
            return Err(ModelError::Checkpoint("invalid elite set".into()));
        }
        Ok(Self { env_name: ck.env_name, d_s: ck.d_s, d_a: ck.d_a, members, elites: ck.elites, norm: ck.norm })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberCheckpoint {
    pub net: MlpCheckpoint,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleCheckpoint {
    pub format: String,
    pub env_name: String,
    pub d_s: usize,
    pub d_a: usize,
    pub members: Vec<MemberCheckpoint>,
    pub elites: Vec<usize>,
    pub norm: NormStats,
}

/// Top-`k` members by NLL on `heldout`; ties go to the lower index.
pub fn select_elites(ensemble: &GaussianEnsemble, heldout: &[&TransitionRecord], k: usize) -> Result<Vec<usize>, ModelError> {
    let n = ensemble.len();
    if k == 0 || k > n {
        return Err(ModelError::TooManyElites { k, n });
    }
    let (x, y) = ensemble.records_to_batch(heldout.iter().copied());
    let scores = (0..n).map(|i| ensemble.nll_normalized(i, &x, &y)).collect::<Result<Vec<_>, _>>()?;
    Ok(rank_by_score(&scores, k))
}

pub(crate) fn rank_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub log_likelihood: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvalReport {
    pub datasets: Vec<DatasetScore>,
    pub average_ll: f64,
    pub worst_ll: f64,
    pub average_mse: f64,
    pub worst_mse: f64,
    /// `(demonstrator, risk)` on the training split, elite-averaged.
    pub domain_risks: Vec<(u32, f64)>,
    pub risk_variance: f64,
}

/// Mean log-density (original units, elite-averaged) and MSE of the
/// elite-mean prediction over all records of one dataset.
pub fn score_dataset(ensemble: &GaussianEnsemble, records: &[&TransitionRecord]) -> Result<(f64, f64), ModelError> {
    if records.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let d = ensemble.target_dim();
    let states = Matrix::from_rows(&records.iter().map(|r| r.state.as_slice()).collect::<Vec<_>>());
    let actions = Matrix::from_rows(&records.iter().map(|r| r.action.as_slice()).collect::<Vec<_>>());
    let targets: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let mut t = r.next_state.clone();
            t.push(r.reward);
            t
        })
        .collect();
    let n = records.len();
    let k = ensemble.elites.len() as f64;
    let mut ll_sum = vec![0.0; n];
    let mut mean_sum = Matrix::zeros(n, d);
    for &e in &ensemble.elites {
        let p = ensemble.predict_batch(e, &states, &actions)?;
        for i in 0..n {
            let mut ll = 0.0;
            for j in 0..d {
                let v = p.var.get(i, j);
                let diff = targets[i][j] - p.mean.get(i, j);
                ll -= 0.5 * (diff * diff / v + v.ln() + LN_2PI);
            }
            ll_sum[i] += ll / k;
        }
        mean_sum.add_assign(&p.mean);
    }
    let ll = ll_sum.iter().sum::<f64>() / n as f64;
    let mut se = 0.0;
    for i in 0..n {
        for j in 0..d {
            let diff = targets[i][j] - mean_sum.get(i, j) / k;
            se += diff * diff;
        }
    }
    Ok((ll, se / (n * d) as f64))
}

/// Elite-averaged training-split NLL per demonstrator.
pub fn domain_risks(ensemble: &GaussianEnsemble, dataset: &MultiDemoDataset) -> Result<Vec<(u32, f64)>, ModelError> {
    dataset
        .demonstrators()
        .into_iter()
        .map(|e| {
            let recs: Vec<&TransitionRecord> = dataset.train_records(e).collect();
            let (x, y) = ensemble.records_to_batch(recs.iter().copied());
            let mut r = 0.0;
            for &m in &ensemble.elites {
                r += ensemble.nll_normalized(m, &x, &y)?;
            }
            Ok((e, r / ensemble.elites.len() as f64))
        })
        .collect()
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Log-likelihood and MSE on each evaluation dataset, their average and
/// worst case, and (when `train` is given) per-domain training risks.
pub fn evaluate_model(
    ensemble: &GaussianEnsemble,
    eval_sets: &[(String, &MultiDemoDataset)],
    train: Option<&MultiDemoDataset>,
) -> Result<ModelEvalReport, ModelError> {
    if eval_sets.is_empty() {
        return Err(ModelError::NoEvalData);
    }
    let mut datasets = Vec::with_capacity(eval_sets.len());
    for (name, ds) in eval_sets {
        if ds.meta().d_s != ensemble.d_s || ds.meta().d_a != ensemble.d_a {
            return Err(ModelError::Dimension(format!("evaluation dataset '{name}' does not match the model")));
        }
        let recs: Vec<&TransitionRecord> = ds.records().collect();
        let (ll, mse) = score_dataset(ensemble, &recs)?;
        datasets.push(DatasetScore { name: name.clone(), log_likelihood: ll, mse });
    }
    let n = datasets.len() as f64;
    let average_ll = datasets.iter().map(|d| d.log_likelihood).sum::<f64>() / n;
    let worst_ll = datasets.iter().map(|d| d.log_likelihood).fold(f64::INFINITY, f64::min);
    let average_mse = datasets.iter().map(|d| d.mse).sum::<f64>() / n;
    let worst_mse = datasets.iter().map(|d| d.mse).fold(f64::NEG_INFINITY, f64::max);
    let domain_risks = match train {
        Some(t) => domain_risks(ensemble, t)?,
        None => vec![],
    };
    let risk_variance = if domain_risks.is_empty() {
        0.0
    } else {
        population_variance(&domain_risks.iter().map(|r| r.1).collect::<Vec<_>>())
    };
    Ok(ModelEvalReport { datasets, average_ll, worst_ll, average_mse, worst_mse, domain_risks, risk_variance })
}
