use std::io;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::topology::TopologyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameters diverged at iteration {t}, node {k}")]
    Divergence { t: usize, k: usize },
    #[error("iteration {needed} is outside the trace (0..={rounds})")]
    Range { needed: usize, rounds: usize },
    #[error("no snapshot at or before iteration {0}")]
    MissingSnapshot(usize),
    #[error("ratio undefined: denominator {denominator:e} (numerator {numerator:e})")]
    UndefinedRatio { numerator: f64, denominator: f64 },
    #[error("reports cannot be combined: {0}")]
    Provenance(String),
    #[error("runs are not comparable: {0}")]
    Comparability(String),
    #[error("statistics undefined: {0}")]
    Statistics(String),
    #[error("trace directory: {0}")]
    Trace(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True when a path or memory budget stopped the computation.
    pub fn is_budget(&self) -> bool {
        matches!(
            self,
            Error::Topology(TopologyError::PathBudget { .. }) | Error::Model(ModelError::HessianCap { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
