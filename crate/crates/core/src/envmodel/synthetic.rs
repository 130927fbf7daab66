//! A controlled regression task whose domains share the input distribution
//! and mean function but differ in noise level.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetError, EnvMeta, MultiDemoDataset, SplitSpec, TransitionRecord};
use crate::seeding::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub id: u32,
    pub noise_var: f64,
    pub records: usize,
}

/// `s, a ~ U(-1, 1)`; `Δs = 0.5 sin(2s) + 0.3a + ε`, `r = s·a − 0.2 s² + ε'`
/// with independent `ε, ε' ~ N(0, noise_var)` per domain.
pub fn heteroskedastic_dataset(
    domains: &[SyntheticDomain],
    split: SplitSpec,
    seed: u64,
) -> Result<MultiDemoDataset, DatasetError> {
    let meta = EnvMeta {
        env_name: "synthetic".into(),
        d_s: 1,
        d_a: 1,
        action_low: vec![-1.0],
        action_high: vec![1.0],
    };
    let mut records = Vec::new();
    for dom in domains {
        let mut rng = rng_from(seed, &[u64::from(dom.id)]);
        let noise = Normal::new(0.0, dom.noise_var.max(0.0).sqrt())
            .map_err(|e| DatasetError::Format(format!("noise variance: {e}")))?;
        for _ in 0..dom.records {
            let s: f64 = rng.random_range(-1.0..1.0);
            let a: f64 = rng.random_range(-1.0..1.0);
            let ds = 0.5 * (2.0 * s).sin() + 0.3 * a + noise.sample(&mut rng);
            let r = s * a - 0.2 * s * s + noise.sample(&mut rng);
            records.push(TransitionRecord {
                state: vec![s],
                action: vec![a],
                reward: r,
                next_state: vec![s + ds],
                done: false,
                demonstrator: dom.id,
            });
        }
    }
    MultiDemoDataset::new(meta, records, split)
}
