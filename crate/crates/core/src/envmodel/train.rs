//! Two-phase ensemble training: ERM until held-out NLL plateaus, then the
//! variance-penalized objective for the same number of epochs.

use std::fmt;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{bound_logvar, gaussian_nll, rank_by_score, GaussianEnsemble, GaussianMember, ModelError};
use crate::datasets::{MultiDemoDataset, TransitionRecord};
use crate::envmodel::EnsembleConfig;
use crate::nn::{AdamConfig, AdamState, Matrix, MlpGrads, NnError};
use crate::seeding::{rng_from, tag};

/// `Σ_e R_e + β·Var(R) + wr + vb`, with the population variance over domains.
pub fn vrex_combine(risks: &[f64], beta: f64, weight_reg: f64, var_bound_reg: f64) -> Result<f64, ModelError> {
    if risks.is_empty() {
        return Err(ModelError::NoDomains);
    }
    let sum: f64 = risks.iter().sum();
    Ok(sum + beta * super::population_variance(risks) + weight_reg + var_bound_reg)
}

/// `∂/∂R_e` of `Σ R + β·Var(R)`: `1 + 2β(R_e − R̄)/M`.
pub fn vrex_risk_weights(risks: &[f64], beta: f64) -> Vec<f64> {
    let m = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / m;
    risks.iter().map(|r| 1.0 + beta * (2.0 * (r - mean) / m)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Sum of domain risks plus regularizers.
    Erm,
    VRex { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Erm,
    Rex,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Erm => "erm",
            Phase::Rex => "rex",
        })
    }
}

/// Normalized inputs/targets with rows grouped contiguously by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBatch {
    pub inputs: Matrix,
    pub targets: Matrix,
    /// `(demonstrator, start, end)` row ranges.
    pub domains: Vec<(u32, usize, usize)>,
}

impl ModelBatch {
    /// One domain per entry of `parts`, records kept in order.
    pub fn from_records(ensemble: &GaussianEnsemble, parts: &[(u32, Vec<&TransitionRecord>)]) -> Self {
        let mut domains = Vec::with_capacity(parts.len());
        let mut start = 0;
        for (e, recs) in parts {
            domains.push((*e, start, start + recs.len()));
            start += recs.len();
        }
        let (inputs, targets) = ensemble.records_to_batch(parts.iter().flat_map(|(_, r)| r.iter().copied()));
        Self { inputs, targets, domains }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub risks: Vec<f64>,
    pub variance_penalty: f64,
    pub weight_reg: f64,
    pub var_bound_reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberGrads {
    pub net: MlpGrads,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
}

impl MemberGrads {
    /// Flattened in the order `net, max_logvar, min_logvar`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.net.data.clone();
        v.extend(&self.max_logvar);
        v.extend(&self.min_logvar);
        v
    }
}

/// Loss of one member on a domain-grouped batch and its exact gradient with
/// respect to the network weights and both log-variance bounds.
pub fn member_loss_and_grad(
    member: &GaussianMember,
    batch: &ModelBatch,
    objective: Objective,
    weight_decay: f64,
    var_bound_coef: f64,
) -> Result<(LossTerms, MemberGrads), NnError> {
    if batch.domains.is_empty() || batch.domains.iter().any(|&(_, s, e)| e <= s) {
        return Err(NnError::InvalidShape("every domain needs at least one row".into()));
    }
    let d = batch.targets.cols();
    let n = batch.inputs.rows();
    let (out, mut tape) = member.net.forward_with_tape(&batch.inputs)?;
    if out.cols() != 2 * d || batch.targets.rows() != n {
        return Err(NnError::DimensionMismatch { what: "model output", expected: 2 * d, got: out.cols() });
    }

    let mut d_mean = Matrix::zeros(n, d);
    let mut d_lv = Matrix::zeros(n, d);
    let mut bounds = Vec::with_capacity(n * d);
    let mut record_nll = vec![0.0; n];
    for i in 0..n {
        let row = out.row(i);
        let y = batch.targets.row(i);
        for j in 0..d {
            let b = bound_logvar(row[d + j], member.max_logvar[j], member.min_logvar[j]);
            let (nll, gm, gl) = gaussian_nll(y[j], row[j], b.value);
            record_nll[i] += nll;
            d_mean.set(i, j, gm);
            d_lv.set(i, j, gl);
            bounds.push(b);
        }
    }
    let risks: Vec<f64> = batch
        .domains
        .iter()
        .map(|&(_, s, e)| record_nll[s..e].iter().sum::<f64>() / (e - s) as f64)
        .collect();

    let weight_reg = weight_decay * member.net.weight_sq_sum();
    let var_bound_reg =
        var_bound_coef * member.max_logvar.iter().zip(&member.min_logvar).map(|(hi, lo)| hi - lo).sum::<f64>();
    let (total, weights, variance_penalty) = match objective {
        Objective::Erm => {
            let sum: f64 = risks.iter().sum();
            (sum + weight_reg + var_bound_reg, vec![1.0; risks.len()], 0.0)
        }
        Objective::VRex { beta } => (
            vrex_combine(&risks, beta, weight_reg, var_bound_reg).map_err(|e| NnError::InvalidShape(e.to_string()))?,
            vrex_risk_weights(&risks, beta),
            beta * super::population_variance(&risks),
        ),
    };

    let mut adjoint = Matrix::zeros(n, 2 * d);
    let mut g_max = vec![0.0; d];
    let mut g_min = vec![0.0; d];
    for (k, &(_, s, e)) in batch.domains.iter().enumerate() {
        let scale = weights[k] / (e - s) as f64;
        for i in s..e {
            let row = adjoint.row_mut(i);
            for j in 0..d {
                let b = bounds[i * d + j];
                let gl = scale * d_lv.get(i, j);
                row[j] = scale * d_mean.get(i, j);
                row[d + j] = gl * b.d_raw;
                g_max[j] += gl * b.d_max;
                g_min[j] += gl * b.d_min;
            }
        }
    }
    let mut net = member.net.backward(&mut tape, &adjoint)?.grads;
    member.net.add_weight_decay_grad(&mut net, weight_decay);
    for j in 0..d {
        g_max[j] += var_bound_coef;
        g_min[j] -= var_bound_coef;
    }
    Ok((
        LossTerms { risks, variance_penalty, weight_reg, var_bound_reg, total },
        MemberGrads { net, max_logvar: g_max, min_logvar: g_min },
    ))
}

/// Stops once, for `patience` consecutive updates, no member beat its best
/// held-out loss so far by more than `threshold` (relative). The best is
/// tracked every epoch, so slow steady gains below the threshold still stop.
#[derive(Clone, Debug, PartialEq)]
pub struct PatienceTracker {
    best: Vec<f64>,
    stale: usize,
    patience: usize,
    threshold: f64,
}

impl PatienceTracker {
    pub fn new(members: usize, patience: usize, threshold: f64) -> Self {
        Self { best: vec![f64::INFINITY; members], stale: 0, patience, threshold }
    }

    /// Record one epoch of held-out losses; returns `true` when training should stop.
    pub fn update(&mut self, losses: &[f64]) -> bool {
        let mut improved = false;
        for (best, &l) in self.best.iter_mut().zip(losses) {
            if best.is_infinite() || (*best - l) / best.abs() > self.threshold {
                improved = true;
            }
            if l < *best {
                *best = l;
            }
        }
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> &[f64] {
        &self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RexTrainConfig {
    pub ensemble: EnsembleConfig,
    pub beta: f64,
    pub weight_decay: f64,
    pub var_bound_coef: f64,
    pub per_domain_batch: usize,
    /// Defaults to `ceil(train records / (domains · per_domain_batch))`.
    pub steps_per_epoch: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub improvement_threshold: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RexTrainConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            beta: 0.0,
            weight_decay: 5e-5,
            var_bound_coef: 0.01,
            per_domain_batch: 64,
            steps_per_epoch: None,
            max_epochs: 500,
            patience: 5,
            improvement_threshold: 0.01,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl RexTrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0) || !(self.var_bound_coef >= 0.0) {
            return bad("regularizer coefficients must be non-negative");
        }
        if self.per_domain_batch == 0 || self.steps_per_epoch == Some(0) {
            return bad("batch size and steps per epoch must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        if !(self.improvement_threshold > 0.0 && self.improvement_threshold < 1.0) {
            return bad("improvement threshold must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.ensemble.init_min_logvar >= self.ensemble.init_max_logvar {
            return bad("initial min log-variance must be below the max");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub heldout_nll: Vec<f64>,
    /// Per member, `(demonstrator, mean minibatch risk over the epoch)`.
    pub domain_risks: Vec<Vec<(u32, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub erm_epochs: usize,
    pub rex_epochs: usize,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// `phase,epoch,member,heldout_nll,domain_id,domain_risk`, one row per
    /// member and domain.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,member,heldout_nll,domain_id,domain_risk\n");
        for ep in &self.epochs {
            for (m, risks) in ep.domain_risks.iter().enumerate() {
                for (e, r) in risks {
                    let _ = writeln!(s, "{},{},{},{},{},{}", ep.phase, ep.epoch, m, ep.heldout_nll[m], e, r);
                }
            }
        }
        s
    }
}

struct DomainData {
    id: u32,
    inputs: Matrix,
    targets: Matrix,
}

fn gather(domains: &[DomainData], per_domain: usize, rng: &mut crate::seeding::Rng) -> ModelBatch {
    let d_in = domains[0].inputs.cols();
    let d_out = domains[0].targets.cols();
    let n = per_domain * domains.len();
    let mut x = Vec::with_capacity(n * d_in);
    let mut y = Vec::with_capacity(n * d_out);
    let mut ranges = Vec::with_capacity(domains.len());
    for (k, dom) in domains.iter().enumerate() {
        for _ in 0..per_domain {
            let i = rng.random_range(0..dom.inputs.rows());
            x.extend_from_slice(dom.inputs.row(i));
            y.extend_from_slice(dom.targets.row(i));
        }
        ranges.push((dom.id, k * per_domain, (k + 1) * per_domain));
    }
    ModelBatch { inputs: Matrix::from_vec(n, d_in, x), targets: Matrix::from_vec(n, d_out, y), domains: ranges }
}

struct MemberOpt {
    net: AdamState,
    bounds: AdamState,
}

/// Train a fresh ensemble: ERM until the held-out NLL plateaus (or
/// `max_epochs`), then the variance-penalized objective for the same number
/// of epochs. Elites are ranked by final held-out NLL.
pub fn train_ensemble(
    dataset: &MultiDemoDataset,
    config: &RexTrainConfig,
) -> Result<(GaussianEnsemble, TrainLog), ModelError> {
    train_ensemble_with(dataset, config, Objective::VRex { beta: config.beta })
}

/// Same schedule as `train_ensemble` with an explicit second-phase
/// objective; `Objective::Erm` gives a plain ERM run of equal length.
pub fn train_ensemble_with(
    dataset: &MultiDemoDataset,
    config: &RexTrainConfig,
    second_phase: Objective,
) -> Result<(GaussianEnsemble, TrainLog), ModelError> {
    config.validate()?;
    if !dataset.has_heldout() {
        return Err(ModelError::InvalidConfig("dataset has no held-out split".into()));
    }
    let meta = dataset.meta();
    let mut ens = GaussianEnsemble::init(
        &meta.env_name,
        meta.d_s,
        meta.d_a,
        dataset.norm().clone(),
        &config.ensemble,
        config.seed,
    )?;

    let mut domains = Vec::new();
    for e in dataset.demonstrators() {
        let recs: Vec<&TransitionRecord> = dataset.train_records(e).collect();
        if recs.is_empty() {
            return Err(ModelError::Dataset(crate::datasets::DatasetError::EmptySplit));
        }
        let (inputs, targets) = ens.records_to_batch(recs);
        domains.push(DomainData { id: e, inputs, targets });
    }
    let total_train: usize = domains.iter().map(|d| d.inputs.rows()).sum();
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| total_train.div_ceil(domains.len() * config.per_domain_batch))
        .max(1);
    let (held_x, held_y) = ens.records_to_batch(dataset.all_heldout());

    let adam = AdamConfig::with_lr(config.lr);
    let mut opts: Vec<MemberOpt> = ens
        .members
        .iter()
        .map(|m| MemberOpt {
            net: AdamState::for_mlp(adam, &m.net),
            bounds: AdamState::new(adam, 2 * m.max_logvar.len()),
        })
        .collect();
    let mut batch_rngs: Vec<_> = (0..ens.len()).map(|i| rng_from(config.seed, &[tag("batch"), i as u64])).collect();

    let mut log = TrainLog { erm_epochs: 0, rex_epochs: 0, steps_per_epoch: steps, epochs: Vec::new() };
    let mut tracker = PatienceTracker::new(ens.len(), config.patience, config.improvement_threshold);
    let mut epoch = 0;
    let mut heldout = Vec::new();
    while log.erm_epochs < config.max_epochs {
        epoch += 1;
        log.erm_epochs += 1;
        let ep = run_epoch(&mut ens, &mut opts, &mut batch_rngs, &domains, config, Objective::Erm, steps, epoch)?;
        heldout = heldout_losses(&ens, &held_x, &held_y, Phase::Erm, epoch)?;
        log.epochs.push(EpochLog { phase: Phase::Erm, epoch, heldout_nll: heldout.clone(), domain_risks: ep });
        if tracker.update(&heldout) {
            break;
        }
    }
    for _ in 0..log.erm_epochs {
        epoch += 1;
        log.rex_epochs += 1;
        let ep = run_epoch(&mut ens, &mut opts, &mut batch_rngs, &domains, config, second_phase, steps, epoch)?;
        heldout = heldout_losses(&ens, &held_x, &held_y, Phase::Rex, epoch)?;
        log.epochs.push(EpochLog { phase: Phase::Rex, epoch, heldout_nll: heldout.clone(), domain_risks: ep });
    }
    ens.elites = rank_by_score(&heldout, config.ensemble.elites);
    Ok((ens, log))
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    ens: &mut GaussianEnsemble,
    opts: &mut [MemberOpt],
    rngs: &mut [crate::seeding::Rng],
    domains: &[DomainData],
    config: &RexTrainConfig,
    objective: Objective,
    steps: usize,
    epoch: usize,
) -> Result<Vec<Vec<(u32, f64)>>, ModelError> {
    let phase = if matches!(objective, Objective::Erm) { "erm" } else { "rex" };
    let mut out = Vec::with_capacity(ens.len());
    for (i, member) in ens.members.iter_mut().enumerate() {
        let mut acc = vec![0.0; domains.len()];
        for _ in 0..steps {
            let batch = gather(domains, config.per_domain_batch, &mut rngs[i]);
            let (terms, grads) =
                member_loss_and_grad(member, &batch, objective, config.weight_decay, config.var_bound_coef)
                    .map_err(|source| ModelError::Member { member: i, source })?;
            if !terms.total.is_finite() {
                return Err(ModelError::NonFiniteLoss { phase, epoch, member: i });
            }
            for (a, r) in acc.iter_mut().zip(&terms.risks) {
                *a += r;
            }
            opts[i].net.step_mlp(&mut member.net, &grads.net).map_err(|source| ModelError::Member { member: i, source })?;
            let d = member.max_logvar.len();
            let mut b: Vec<f64> = member.max_logvar.iter().chain(&member.min_logvar).copied().collect();
            let g: Vec<f64> = grads.max_logvar.iter().chain(&grads.min_logvar).copied().collect();
            opts[i].bounds.step_flat(&mut b, &g, &[2 * d]).map_err(|source| ModelError::Member { member: i, source })?;
            member.max_logvar.copy_from_slice(&b[..d]);
            member.min_logvar.copy_from_slice(&b[d..]);
        }
        out.push(domains.iter().zip(&acc).map(|(dom, a)| (dom.id, a / steps as f64)).collect());
    }
    Ok(out)
}

fn heldout_losses(
    ens: &GaussianEnsemble,
    x: &Matrix,
    y: &Matrix,
    phase: Phase,
    epoch: usize,
) -> Result<Vec<f64>, ModelError> {
    (0..ens.len())
        .map(|m| {
            let l = ens.nll_normalized(m, x, y)?;
            if l.is_finite() {
                Ok(l)
            } else {
                Err(ModelError::NonFiniteLoss { phase: if phase == Phase::Erm { "erm" } else { "rex" }, epoch, member: m })
            }
        })
        .collect()
}
