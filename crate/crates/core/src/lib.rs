// Numeric kernels index several parallel buffers at once.
#![allow(clippy::needless_range_loop)]
// `!(x >= 0.0)` deliberately rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod datasets;
pub mod envmodel;
pub mod envs;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod rollout;
pub mod sac;
pub mod seeding;
