//! Demonstrator-tagged transition datasets.
//!
//! A `MultiDemoDataset` is the union of per-demonstrator record groups. Each
//! group is split into train and held-out indices; normalization statistics
//! are computed from train records only.
//!
//! On disk a dataset is JSON Lines: one header object followed by one record
//! per line.
//!
//! ```text
//! {"format":"dimorl-ds-v1","d_s":4,"d_a":2,"action_low":[-1,-1],"action_high":[1,1],"env_name":"point_mass_2d"}
//! {"s":[..],"a":[..],"r":-0.5,"s2":[..],"done":false,"e":1}
//! ```
//!
//! The header may also carry `holdout_fraction` and `split_seed`; the split is
//! recomputed from them on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seeding::{rng_from, Rng};

pub const DATASET_FORMAT: &str = "dimorl-ds-v1";
/// Lower clamp on every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_HOLDOUT: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset format: {0}")]
    Format(String),
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("dataset has no records")]
    Empty,
    #[error("train split is empty")]
    EmptySplit,
    #[error("holdout fraction {0} outside (0, 0.5)")]
    InvalidFraction(f64),
    #[error("demonstrator {demonstrator} has {size} records, too few to hold out at least one")]
    GroupTooSmall { demonstrator: u32, size: usize },
    #[error("unknown demonstrator id {0}")]
    UnknownDemonstrator(u32),
    #[error("per-domain batch size must be at least 1")]
    InvalidBatchSize,
}

/// One offline tuple `(s, a, r, s', done, e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRecord {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: Vec<f64>,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: Vec<f64>,
    pub done: bool,
    #[serde(rename = "e")]
    pub demonstrator: u32,
}

impl TransitionRecord {
    fn validate(&self, meta: &EnvMeta) -> Result<(), String> {
        if self.state.len() != meta.d_s {
            return Err(format!("state has length {}, header says d_s = {}", self.state.len(), meta.d_s));
        }
        if self.next_state.len() != meta.d_s {
            return Err(format!(
                "next state has length {}, header says d_s = {}",
                self.next_state.len(),
                meta.d_s
            ));
        }
        if self.action.len() != meta.d_a {
            return Err(format!("action has length {}, header says d_a = {}", self.action.len(), meta.d_a));
        }
        if self.demonstrator < 1 {
            return Err("demonstrator id must be >= 1".into());
        }
        let finite = self.state.iter().chain(&self.action).chain(&self.next_state).all(|x| x.is_finite())
            && self.reward.is_finite();
        if !finite {
            return Err("non-finite value".into());
        }
        Ok(())
    }

    /// Model regression target `(s' − s, r)`.
    pub fn target(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.next_state.iter().zip(&self.state).map(|(n, s)| n - s).collect();
        t.push(self.reward);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub env_name: String,
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    d_s: usize,
    d_a: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    env_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    holdout_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_seed: Option<u64>,
}

/// Train / held-out indices of one demonstrator group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupSplit {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitMap {
    pub groups: BTreeMap<u32, GroupSplit>,
}

/// How the split was produced; persisted in the file header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// Every record is a train record.
    None,
    Holdout { fraction: f64, seed: u64 },
}

/// Per-dimension statistics of model inputs `(s, a)` and targets `(Δs, r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl NormStats {
    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        normalize(x, &self.input_mean, &self.input_std)
    }

    pub fn normalize_target(&self, y: &[f64]) -> Vec<f64> {
        normalize(y, &self.target_mean, &self.target_std)
    }

    pub fn denormalize_target(&self, y: &[f64]) -> Vec<f64> {
        denormalize(y, &self.target_mean, &self.target_std)
    }

    pub fn denormalize_input(&self, x: &[f64]) -> Vec<f64> {
        denormalize(x, &self.input_mean, &self.input_std)
    }
}

pub fn normalize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s).collect()
}

pub fn denormalize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((x, m), s)| x * s + m).collect()
}

/// Per-domain minibatch: record indices into one demonstrator group.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub demonstrator: u32,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDemoDataset {
    meta: EnvMeta,
    groups: BTreeMap<u32, Vec<TransitionRecord>>,
    split_spec: SplitSpec,
    split: SplitMap,
    norm: NormStats,
}

impl MultiDemoDataset {
    /// Group, validate and split `records`; norm stats come from the train split.
    pub fn new(meta: EnvMeta, records: Vec<TransitionRecord>, split_spec: SplitSpec) -> Result<Self, DatasetError> {
        if meta.action_low.len() != meta.d_a || meta.action_high.len() != meta.d_a {
            return Err(DatasetError::Format("action bounds do not match d_a".into()));
        }
        let mut groups: BTreeMap<u32, Vec<TransitionRecord>> = BTreeMap::new();
        for r in records {
            r.validate(&meta).map_err(DatasetError::InvalidRecord)?;
            groups.entry(r.demonstrator).or_default().push(r);
        }
        Self::from_groups(meta, groups, split_spec)
    }

    fn from_groups(
        meta: EnvMeta,
        groups: BTreeMap<u32, Vec<TransitionRecord>>,
        split_spec: SplitSpec,
    ) -> Result<Self, DatasetError> {
        if groups.is_empty() {
            return Err(DatasetError::Empty);
        }
        let split = match split_spec {
            SplitSpec::None => SplitMap {
                groups: groups
                    .iter()
                    .map(|(&e, g)| (e, GroupSplit { train: (0..g.len()).collect(), heldout: vec![] }))
                    .collect(),
            },
            SplitSpec::Holdout { fraction, seed } => make_split(&groups, fraction, &mut rng_from(seed, &[]))?,
        };
        let norm = compute_norm_stats(&groups, &split)?;
        Ok(Self { meta, groups, split_spec, split, norm })
    }

    /// Same records with a new split (and recomputed norm stats).
    pub fn resplit(self, split_spec: SplitSpec) -> Result<Self, DatasetError> {
        Self::from_groups(self.meta, self.groups, split_spec)
    }

    pub fn meta(&self) -> &EnvMeta {
        &self.meta
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn split(&self) -> &SplitMap {
        &self.split
    }

    pub fn split_spec(&self) -> SplitSpec {
        self.split_spec
    }

    pub fn demonstrators(&self) -> Vec<u32> {
        self.groups.keys().copied().collect()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, e: u32) -> Option<&[TransitionRecord]> {
        self.groups.get(&e).map(Vec::as_slice)
    }

    pub fn groups(&self) -> impl Iterator<Item = (u32, &[TransitionRecord])> {
        self.groups.iter().map(|(&e, g)| (e, g.as_slice()))
    }

    /// All records in group order.
    pub fn records(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.groups.values().flatten()
    }

    pub fn train_records(&self, e: u32) -> impl Iterator<Item = &TransitionRecord> {
        let g = &self.groups[&e];
        self.split.groups[&e].train.iter().map(move |&i| &g[i])
    }

    pub fn heldout_records(&self, e: u32) -> impl Iterator<Item = &TransitionRecord> {
        let g = &self.groups[&e];
        self.split.groups[&e].heldout.iter().map(move |&i| &g[i])
    }

    pub fn all_train(&self) -> Vec<&TransitionRecord> {
        self.groups.keys().flat_map(|&e| self.train_records(e)).collect()
    }

    pub fn all_heldout(&self) -> Vec<&TransitionRecord> {
        self.groups.keys().flat_map(|&e| self.heldout_records(e)).collect()
    }

    pub fn has_heldout(&self) -> bool {
        self.split.groups.values().any(|g| !g.heldout.is_empty())
    }

    /// One batch of `per_domain` train records per demonstrator, sampled
    /// uniformly with replacement; batches come out in demonstrator-id order.
    pub fn stratified_minibatch(&self, per_domain: usize, rng: &mut Rng) -> Result<Vec<DomainBatch>, DatasetError> {
        if per_domain == 0 {
            return Err(DatasetError::InvalidBatchSize);
        }
        let mut out = Vec::with_capacity(self.groups.len());
        for &e in self.groups.keys() {
            let split = self.split.groups.get(&e).ok_or(DatasetError::UnknownDemonstrator(e))?;
            if split.train.is_empty() {
                return Err(DatasetError::EmptySplit);
            }
            let indices = (0..per_domain).map(|_| split.train[rng.random_range(0..split.train.len())]).collect();
            out.push(DomainBatch { demonstrator: e, indices });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let (holdout_fraction, split_seed) = match self.split_spec {
            SplitSpec::None => (None, None),
            SplitSpec::Holdout { fraction, seed } => (Some(fraction), Some(seed)),
        };
        let header = Header {
            format: DATASET_FORMAT.into(),
            d_s: self.meta.d_s,
            d_a: self.meta.d_a,
            action_low: self.meta.action_low.clone(),
            action_high: self.meta.action_high.clone(),
            env_name: self.meta.env_name.clone(),
            holdout_fraction,
            split_seed,
        };
        let json = |e: serde_json::Error| DatasetError::Format(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?).map_err(io)?;
        for r in self.records() {
            writeln!(w, "{}", serde_json::to_string(r).map_err(json)?).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut lines = reader.lines().enumerate();
        let header_line = match lines.next() {
            Some((_, l)) => l.map_err(io)?,
            None => return Err(DatasetError::Format("empty file".into())),
        };
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| DatasetError::Schema { line: 1, msg: format!("bad header: {e}") })?;
        if header.format != DATASET_FORMAT {
            return Err(DatasetError::Format(format!(
                "version mismatch: expected {DATASET_FORMAT}, found {}",
                header.format
            )));
        }
        let meta = EnvMeta {
            env_name: header.env_name,
            d_s: header.d_s,
            d_a: header.d_a,
            action_low: header.action_low,
            action_high: header.action_high,
        };
        let mut groups: BTreeMap<u32, Vec<TransitionRecord>> = BTreeMap::new();
        for (i, line) in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TransitionRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::Schema { line: i + 1, msg: e.to_string() })?;
            r.validate(&meta).map_err(|msg| DatasetError::Schema { line: i + 1, msg })?;
            groups.entry(r.demonstrator).or_default().push(r);
        }
        let split_spec = match (header.holdout_fraction, header.split_seed) {
            (Some(fraction), Some(seed)) => SplitSpec::Holdout { fraction, seed },
            (None, None) => SplitSpec::None,
            _ => return Err(DatasetError::Format("holdout_fraction and split_seed must appear together".into())),
        };
        Self::from_groups(meta, groups, split_spec)
    }
}

/// Per-demonstrator stratified split. Each group holds out
/// `round(fraction · n)` records, which must be at least one and leave at
/// least one train record.
pub fn make_split(
    groups: &BTreeMap<u32, Vec<TransitionRecord>>,
    fraction: f64,
    rng: &mut Rng,
) -> Result<SplitMap, DatasetError> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut out = SplitMap::default();
    for (&e, g) in groups {
        let n = g.len();
        let hold = (fraction * n as f64).round() as usize;
        if hold == 0 || hold >= n {
            return Err(DatasetError::GroupTooSmall { demonstrator: e, size: n });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut heldout = idx[..hold].to_vec();
        let mut train = idx[hold..].to_vec();
        heldout.sort_unstable();
        train.sort_unstable();
        out.groups.insert(e, GroupSplit { train, heldout });
    }
    Ok(out)
}

/// Mean and population std of inputs and targets over train records; std is
/// clamped below by `STD_FLOOR`.
pub fn compute_norm_stats(
    groups: &BTreeMap<u32, Vec<TransitionRecord>>,
    split: &SplitMap,
) -> Result<NormStats, DatasetError> {
    let rows = || {
        groups.iter().flat_map(move |(e, g)| {
            split.groups.get(e).into_iter().flat_map(move |s| s.train.iter().map(move |&i| &g[i]))
        })
    };
    let first = rows().next().ok_or(DatasetError::EmptySplit)?;
    let d_in = first.state.len() + first.action.len();
    let d_out = first.state.len() + 1;
    let mut n = 0usize;
    let (mut sx, mut sy) = (vec![0.0; d_in], vec![0.0; d_out]);
    for r in rows() {
        n += 1;
        for (acc, v) in sx.iter_mut().zip(r.state.iter().chain(&r.action)) {
            *acc += v;
        }
        for (acc, v) in sy.iter_mut().zip(r.target()) {
            *acc += v;
        }
    }
    let nf = n as f64;
    let mx: Vec<f64> = sx.iter().map(|s| s / nf).collect();
    let my: Vec<f64> = sy.iter().map(|s| s / nf).collect();
    let (mut vx, mut vy) = (vec![0.0; d_in], vec![0.0; d_out]);
    for r in rows() {
        for ((acc, v), m) in vx.iter_mut().zip(r.state.iter().chain(&r.action)).zip(&mx) {
            *acc += (v - m) * (v - m);
        }
        for ((acc, v), m) in vy.iter_mut().zip(r.target()).zip(&my) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = |v: Vec<f64>| v.into_iter().map(|s| (s / nf).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { input_mean: mx, input_std: std(vx), target_mean: my, target_std: std(vy) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn meta(d_s: usize, d_a: usize) -> EnvMeta {
        EnvMeta {
            env_name: "test".into(),
            d_s,
            d_a,
            action_low: vec![-1.0; d_a],
            action_high: vec![1.0; d_a],
        }
    }

    fn rec(e: u32, x: f64) -> TransitionRecord {
        TransitionRecord {
            state: vec![x, 2.0],
            action: vec![-x],
            reward: x * 0.5,
            next_state: vec![x + 0.1, 2.0],
            done: false,
            demonstrator: e,
        }
    }

    fn synthetic(groups: &[(u32, usize)]) -> Vec<TransitionRecord> {
        let mut out = vec![];
        for &(e, n) in groups {
            for i in 0..n {
                out.push(rec(e, i as f64 * 0.37 + e as f64));
            }
        }
        out
    }

    #[test]
    fn groups_and_totals() {
        let ds = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 5), (3, 7)]), SplitSpec::None).unwrap();
        assert_eq!(ds.num_groups(), 2);
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.demonstrators(), vec![1, 3]);
    }

    #[test]
    fn save_load_round_trip() {
        let ds = MultiDemoDataset::new(
            meta(2, 1),
            synthetic(&[(2, 30), (1, 20)]),
            SplitSpec::Holdout { fraction: 0.1, seed: 9 },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        ds.save(&p).unwrap();
        let back = MultiDemoDataset::load(&p).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_reports_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"format":"dimorl-ds-v1","d_s":2,"d_a":1,"action_low":[-1],"action_high":[1],"env_name":"x"}"#, "\n",
                r#"{"s":[0,0],"a":[0],"r":0,"s2":[0,0],"done":false,"e":1}"#, "\n",
                r#"{"s":[0,0,0],"a":[0],"r":0,"s2":[0,0],"done":false,"e":1}"#, "\n",
            ),
        )
        .unwrap();
        match MultiDemoDataset::load(&p) {
            Err(DatasetError::Schema { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("d_s"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        std::fs::write(
            &p,
            r#"{"format":"dimorl-ds-v0","d_s":2,"d_a":1,"action_low":[-1],"action_high":[1],"env_name":"x"}"#,
        )
        .unwrap();
        assert!(matches!(MultiDemoDataset::load(&p), Err(DatasetError::Format(_))));
    }

    #[test]
    fn split_arithmetic_and_partition() {
        let ds = MultiDemoDataset::new(
            meta(2, 1),
            synthetic(&[(1, 20_000), (2, 37)]),
            SplitSpec::Holdout { fraction: 0.1, seed: 1 },
        )
        .unwrap();
        let g1 = &ds.split().groups[&1];
        assert_eq!(g1.heldout.len(), 2_000);
        for (&e, g) in &ds.split().groups {
            let n = ds.group(e).unwrap().len();
            let mut all: Vec<usize> = g.train.iter().chain(&g.heldout).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let expect = 0.1 * n as f64;
            assert!((g.heldout.len() as f64 - expect).abs() <= 1.0);
        }
    }

    #[test]
    fn split_is_seeded() {
        let a = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 50)]), SplitSpec::Holdout { fraction: 0.2, seed: 3 })
            .unwrap();
        let b = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 50)]), SplitSpec::Holdout { fraction: 0.2, seed: 3 })
            .unwrap();
        assert_eq!(a.split(), b.split());
    }

    #[test]
    fn split_errors() {
        let r = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 3)]), SplitSpec::Holdout { fraction: 0.1, seed: 3 });
        assert!(matches!(r, Err(DatasetError::GroupTooSmall { demonstrator: 1, size: 3 })));
        let r = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 30)]), SplitSpec::Holdout { fraction: 0.5, seed: 3 });
        assert!(matches!(r, Err(DatasetError::InvalidFraction(_))));
    }

    #[test]
    fn constant_column_gets_floor_std() {
        let ds = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 10)]), SplitSpec::None).unwrap();
        assert_eq!(ds.norm().input_mean[1], 2.0);
        assert_eq!(ds.norm().input_std[1], STD_FLOOR);
    }

    #[test]
    fn standard_normal_column_stats() {
        let mut rng = rng_from(11, &[]);
        let recs: Vec<_> = (0..100_000)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                rec(1, x)
            })
            .collect();
        let ds = MultiDemoDataset::new(meta(2, 1), recs, SplitSpec::None).unwrap();
        assert!(ds.norm().input_mean[0].abs() < 0.02);
        assert!((ds.norm().input_std[0] - 1.0).abs() < 0.02);
    }

    #[test]
    fn stats_ignore_heldout_rows() {
        let spec = SplitSpec::Holdout { fraction: 0.2, seed: 5 };
        let ds = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 40), (2, 40)]), spec).unwrap();
        let mut groups = ds.groups.clone();
        for (e, s) in &ds.split.groups {
            for &i in &s.heldout {
                groups.get_mut(e).unwrap()[i].state[0] = 1e6;
                groups.get_mut(e).unwrap()[i].reward = -1e6;
            }
        }
        let perturbed = compute_norm_stats(&groups, &ds.split).unwrap();
        assert_eq!(&perturbed, ds.norm());
    }

    #[test]
    fn stratified_batches_shape_and_purity() {
        let ds = MultiDemoDataset::new(
            meta(2, 1),
            synthetic(&[(1, 50), (2, 60), (3, 70), (4, 5), (5, 1)]),
            SplitSpec::None,
        )
        .unwrap();
        let batches = ds.stratified_minibatch(256, &mut rng_from(2, &[])).unwrap();
        assert_eq!(batches.len(), 5);
        for b in &batches {
            assert_eq!(b.indices.len(), 256);
            let g = ds.group(b.demonstrator).unwrap();
            assert!(b.indices.iter().all(|&i| g[i].demonstrator == b.demonstrator));
        }
        let again = ds.stratified_minibatch(256, &mut rng_from(2, &[])).unwrap();
        assert_eq!(batches, again);
    }

    #[test]
    fn stratified_sampling_is_uniform() {
        let ds = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 100)]), SplitSpec::None).unwrap();
        let mut rng = rng_from(77, &[]);
        let draws = 10_000;
        let mut counts = [0usize; 100];
        for _ in 0..draws {
            let b = ds.stratified_minibatch(1, &mut rng).unwrap();
            counts[b[0].indices[0]] += 1;
        }
        let p = 0.01;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        // 3σ per cell; with 100 cells allow at most one outlier.
        let outliers = counts.iter().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sigma).count();
        assert!(outliers <= 1, "{counts:?}");
    }

    #[test]
    fn normalization_inverts() {
        let ds = MultiDemoDataset::new(meta(2, 1), synthetic(&[(1, 30)]), SplitSpec::None).unwrap();
        let x = [3.5, -1.25, 0.75];
        let back = ds.norm().denormalize_input(&ds.norm().normalize_input(&x));
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
