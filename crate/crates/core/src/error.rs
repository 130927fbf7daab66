use std::path::PathBuf;

use crate::analysis::AnalysisError;
use crate::config::ConfigError;
use crate::datasets::DatasetError;
use crate::envmodel::ModelError;
use crate::envs::EnvError;
use crate::nn::NnError;
use crate::pipeline::Stage;
use crate::rollout::RolloutError;
use crate::sac::SacError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_DEPENDENCY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_DEGENERATE: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum DimorlError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{stage} requires {format} artifact {} (run {producer} first)", path.display())]
    MissingArtifact { stage: Stage, format: &'static str, producer: Stage, path: PathBuf },
    #[error("upstream {producer} job at {} did not complete", path.display())]
    UpstreamFailed { producer: Stage, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn nn_numeric(e: &NnError) -> bool {
    matches!(
        e,
        NnError::NonFiniteInput
            | NnError::NonFiniteOutput
            | NnError::NonFiniteParameter { .. }
            | NnError::NonFiniteGradient { .. }
    )
}

fn model_numeric(e: &ModelError) -> bool {
    match e {
        ModelError::NonFiniteLoss { .. } | ModelError::NonPositiveVariance => true,
        ModelError::Member { source, .. } => nn_numeric(source),
        _ => false,
    }
}

fn rollout_numeric(e: &RolloutError) -> bool {
    matches!(e, RolloutError::Model(m) if model_numeric(m))
}

impl DimorlError {
    /// True for failures caused by non-finite values during training or
    /// evaluation. The pipeline records these per job instead of aborting.
    pub fn is_numeric(&self) -> bool {
        match self {
            DimorlError::Model(e) => model_numeric(e),
            DimorlError::Rollout(e) => rollout_numeric(e),
            DimorlError::Env(EnvError::NonFiniteState(_)) => true,
            DimorlError::Sac(e) => match e {
                SacError::NonFiniteLoss { .. } => true,
                SacError::Network { source, .. } => nn_numeric(source),
                SacError::Rollout(r) => rollout_numeric(r),
                SacError::Env(EnvError::NonFiniteState(_)) => true,
                _ => false,
            },
            DimorlError::Analysis(AnalysisError::NonFinite) => true,
            _ => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            DimorlError::Config(_) => EXIT_CONFIG,
            DimorlError::MissingArtifact { .. } | DimorlError::UpstreamFailed { .. } => EXIT_MISSING_DEPENDENCY,
            e if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_FAILURE,
        }
    }
}
