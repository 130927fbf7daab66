//! Post-hoc analyses: PCA projection of visited state-action pairs,
//! degenerate-reward detection, log-likelihood/return correlation, and the
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("need 1 <= k <= min(n, d); got k = {k}, n = {n}, d = {d}")]
    BadRank { k: usize, n: usize, d: usize },
    #[error("dimension mismatch: projection has d = {expected}, records have {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("correlation needs at least two distinct x values")]
    DegenerateX,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report serialization: {0}")]
    Json(String),
}

pub const PCA_CAVEAT: &str = "The projection keeps only the leading principal components; when their explained-variance ratios differ between runs, that difference alone may account for some or all of the apparent difference in coverage.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `d`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching unit eigenvectors (as rows), in
/// descending eigenvalue order.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Population covariance of the rows.
pub fn covariance(records: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (records.rows(), records.cols());
    let mut mean = vec![0.0; d];
    for row in records.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in records.iter_rows() {
        for i in 0..d {
            let a = row[i] - mean[i];
            for j in i..d {
                cov[i][j] += a * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

pub fn fit_pca(records: &Matrix, k: usize) -> Result<PcaProjection, AnalysisError> {
    let (n, d) = (records.rows(), records.cols());
    if k == 0 || k > n.min(d) {
        return Err(AnalysisError::BadRank { k, n, d });
    }
    if !records.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let (mean, cov) = covariance(records);
    let (values, vectors) = symmetric_eigen(&cov);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    let mut explained_variance_ratio = Vec::with_capacity(k);
    for i in 0..k {
        let mut c = vectors[i].clone();
        fix_sign(&mut c);
        components.push(c);
        let v = values[i].max(0.0);
        explained_variance.push(v);
        explained_variance_ratio.push(if total > 0.0 { v / total } else { 0.0 });
    }
    Ok(PcaProjection { mean, components, explained_variance, explained_variance_ratio })
}

pub fn project(projection: &PcaProjection, records: &Matrix) -> Result<Matrix, AnalysisError> {
    let d = projection.mean.len();
    if records.cols() != d {
        return Err(AnalysisError::Dimension { expected: d, got: records.cols() });
    }
    let k = projection.components.len();
    let mut out = Matrix::zeros(records.rows(), k);
    for (i, row) in records.iter_rows().enumerate() {
        for (c, comp) in projection.components.iter().enumerate() {
            let v: f64 = row.iter().zip(&projection.mean).zip(comp).map(|((x, m), w)| (x - m) * w).sum();
            out.set(i, c, v);
        }
    }
    Ok(out)
}

/// Map projected coordinates back into record space.
pub fn reconstruct(projection: &PcaProjection, coords: &Matrix) -> Matrix {
    let d = projection.mean.len();
    let mut out = Matrix::zeros(coords.rows(), d);
    for (i, row) in coords.iter_rows().enumerate() {
        let dst = out.row_mut(i);
        dst.copy_from_slice(&projection.mean);
        for (c, comp) in row.iter().zip(&projection.components) {
            for (x, w) in dst.iter_mut().zip(comp) {
                *x += c * w;
            }
        }
    }
    out
}

/// `(step, sample_size)` for every positive multiple of `sample_every`
/// strictly below `training_steps`.
pub fn pool_sampling_schedule(training_steps: usize, sample_every: usize, sample_size: usize) -> Vec<(usize, usize)> {
    if sample_every == 0 {
        return vec![];
    }
    (1..).map(|k| k * sample_every).take_while(|&s| s < training_steps).map(|s| (s, sample_size)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDegeneracy {
    pub max_abs: f64,
    /// `(mark, max |r| over the first `mark` steps)`.
    pub max_abs_within: Vec<(usize, f64)>,
    pub exceeds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegenerateReport {
    pub threshold: f64,
    pub marks: Vec<usize>,
    pub trajectories: Vec<TrajectoryDegeneracy>,
    pub exceed_count: usize,
    /// `(mark, number of trajectories exceeding within the first `mark` steps)`.
    pub exceed_within: Vec<(usize, usize)>,
    /// Largest `max_abs` among trajectories that never exceed the threshold.
    pub largest_clean: Option<f64>,
}

pub const DEFAULT_DEGENERATE_THRESHOLD: f64 = 1e6;
pub const DEFAULT_MARKS: [usize; 2] = [5, 10];

pub fn detect_degenerate_rewards(trajectories: &[Vec<f64>], threshold: f64, marks: &[usize]) -> DegenerateReport {
    let max_abs = |xs: &[f64]| xs.iter().map(|x| if x.is_finite() { x.abs() } else { f64::INFINITY }).fold(0.0, f64::max);
    let per: Vec<TrajectoryDegeneracy> = trajectories
        .iter()
        .map(|t| {
            let m = max_abs(t);
            TrajectoryDegeneracy {
                max_abs: m,
                max_abs_within: marks.iter().map(|&h| (h, max_abs(&t[..h.min(t.len())]))).collect(),
                exceeds: m > threshold,
            }
        })
        .collect();
    let exceed_within = marks
        .iter()
        .enumerate()
        .map(|(k, &h)| (h, per.iter().filter(|t| t.max_abs_within[k].1 > threshold).count()))
        .collect();
    let largest_clean = per.iter().filter(|t| !t.exceeds).map(|t| t.max_abs).reduce(f64::max);
    DegenerateReport {
        threshold,
        marks: marks.to_vec(),
        exceed_count: per.iter().filter(|t| t.exceeds).count(),
        trajectories: per,
        exceed_within,
        largest_clean,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of return on average log-likelihood.
pub fn correlation_report(pairs: &[(f64, f64)]) -> Result<CorrelationReport, AnalysisError> {
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if pairs.len() < 2 || sxx == 0.0 {
        return Err(AnalysisError::DegenerateX);
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = pairs.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(CorrelationReport { points: pairs.to_vec(), slope, intercept, r_squared })
}

/// `"mean ± std"` over completed seeds (population std), `"mean ± std (n)"`
/// when fewer than `expected` completed, `"-"` when none did.
pub fn format_cell(values: &[Option<f64>], expected: usize) -> String {
    let done: Vec<f64> = values.iter().flatten().copied().collect();
    if done.is_empty() {
        return "-".into();
    }
    let (m, s) = crate::sac::mean_std(&done);
    if done.len() < expected {
        format!("{m:.2} ± {s:.2} ({})", done.len())
    } else {
        format!("{m:.2} ± {s:.2}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvalRow {
    pub beta: f64,
    pub seed: u64,
    pub average_ll: Option<f64>,
    pub worst_ll: Option<f64>,
    pub average_mse: Option<f64>,
    pub worst_mse: Option<f64>,
    pub risk_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalRow {
    pub beta: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Mean true-env return; `None` when the run failed or is missing.
    pub mean_return: Option<f64>,
    pub degenerate_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCell {
    pub beta: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub sigma: f64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub completed: usize,
    pub expected: usize,
    pub cell: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub explained_variance_ratio: Vec<f64>,
    pub caveat: String,
    /// `(label, step, x, y)` per projected record.
    #[serde(skip)]
    pub coords: Vec<(String, usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub env: String,
    pub roster: String,
    pub seeds: Vec<u64>,
    pub notes: Vec<String>,
    /// Behavioral mean return per demonstrator.
    pub demonstrators: BTreeMap<u32, f64>,
    pub model_eval: Vec<ModelEvalRow>,
    pub policy_eval: Vec<PolicyEvalRow>,
    pub policy_cells: Vec<PolicyCell>,
    pub correlation: Option<CorrelationReport>,
    pub pca: Option<PcaSummary>,
    pub degenerate: Option<DegenerateReport>,
}

/// Group policy rows into cells keyed by `(β, λ, h, σ)` in first-seen order.
pub fn policy_cells(rows: &[PolicyEvalRow], expected: usize) -> Vec<PolicyCell> {
    let mut cells: Vec<PolicyCell> = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = Vec::new();
    for r in rows {
        let key = (r.beta, r.lambda, r.horizon, r.sigma);
        let idx = match cells.iter().position(|c| (c.beta, c.lambda, c.horizon, c.sigma) == key) {
            Some(i) => i,
            None => {
                cells.push(PolicyCell {
                    beta: r.beta,
                    lambda: r.lambda,
                    horizon: r.horizon,
                    sigma: r.sigma,
                    mean: None,
                    std: None,
                    completed: 0,
                    expected,
                    cell: String::new(),
                });
                values.push(Vec::new());
                cells.len() - 1
            }
        };
        values[idx].push(r.mean_return);
    }
    for (c, v) in cells.iter_mut().zip(&values) {
        let done: Vec<f64> = v.iter().flatten().copied().collect();
        c.completed = done.len();
        if !done.is_empty() {
            let (m, s) = crate::sac::mean_std(&done);
            c.mean = Some(m);
            c.std = Some(s);
        }
        c.cell = format_cell(v, expected);
    }
    cells
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v}"))
}

fn write(path: &Path, text: &str) -> Result<(), AnalysisError> {
    std::fs::write(path, text).map_err(|source| AnalysisError::Io { path: path.display().to_string(), source })
}

/// Write `report.json` and the CSV tables into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(), AnalysisError> {
    std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Io { path: dir.display().to_string(), source })?;
    let json = serde_json::to_string_pretty(report).map_err(|e| AnalysisError::Json(e.to_string()))?;
    write(&dir.join("report.json"), &(json + "\n"))?;

    let mut s = String::from("beta,seed,average_ll,worst_ll,average_mse,worst_mse,risk_std\n");
    for r in &report.model_eval {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.beta,
            r.seed,
            opt(r.average_ll),
            opt(r.worst_ll),
            opt(r.average_mse),
            opt(r.worst_mse),
            opt(r.risk_std)
        );
    }
    write(&dir.join("model_eval.csv"), &s)?;

    let mut s = String::from("beta,lambda,h,sigma,completed,expected,mean,std,cell\n");
    for c in &report.policy_cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},\"{}\"",
            c.beta,
            c.lambda,
            c.horizon,
            c.sigma,
            c.completed,
            c.expected,
            opt(c.mean),
            opt(c.std),
            c.cell
        );
    }
    write(&dir.join("policy_eval.csv"), &s)?;

    let mut s = String::from("label,step,pc1,pc2\n");
    if let Some(p) = &report.pca {
        let _ = writeln!(s, "# {}", p.caveat);
        let _ = writeln!(s, "# explained_variance_ratio {:?}", p.explained_variance_ratio);
        for (label, step, x, y) in &p.coords {
            let _ = writeln!(s, "{label},{step},{x},{y}");
        }
    }
    write(&dir.join("pca_coords.csv"), &s)?;

    let mut s = String::from("trajectory,max_abs,exceeds");
    if let Some(d) = &report.degenerate {
        for m in &d.marks {
            let _ = write!(s, ",max_abs_first_{m}");
        }
        s.push('\n');
        for (i, t) in d.trajectories.iter().enumerate() {
            let _ = write!(s, "{i},{},{}", t.max_abs, u8::from(t.exceeds));
            for (_, v) in &t.max_abs_within {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    } else {
        s.push('\n');
    }
    write(&dir.join("degenerate_rewards.csv"), &s)
}

pub fn load_report(path: &Path) -> Result<Report, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|source| AnalysisError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| AnalysisError::Json(e.to_string()))
}
