use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EvalSet;
use crate::engine::TrainingTrace;
use crate::error::{Error, Result};
use crate::influence::proximal_inflow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub node: usize,
    /// Mean proximal influence on the victim over the window.
    pub mean: f64,
}

/// Rank the victim's senders by mean proximal influence over `window`,
/// most harmful (largest) first. Ties keep ascending node order.
pub fn detect_anomaly(
    trace: &TrainingTrace,
    victim: usize,
    eval: &EvalSet,
    window: Range<usize>,
) -> Result<Vec<AnomalyScore>> {
    if window.is_empty() {
        return Err(Error::Config("empty anomaly window".into()));
    }
    if window.end > trace.rounds() {
        return Err(Error::Range {
            needed: window.end,
            rounds: trace.rounds(),
        });
    }
    if victim >= trace.n() {
        return Err(Error::Config(format!("node {victim} out of range")));
    }
    let senders = trace.topology().in_neighbors(victim).iter().filter(|&&l| l != victim).count();
    if senders < 2 {
        return Err(Error::Config(format!("node {victim} has {senders} in-neighbors, need at least 2")));
    }
    let rows = window
        .clone()
        .into_par_iter()
        .map(|t| proximal_inflow(trace, victim, t, eval))
        .collect::<Result<Vec<_>>>()?;
    let mut sums: BTreeMap<usize, f64> = trace
        .topology()
        .in_neighbors(victim)
        .iter()
        .filter(|&&l| l != victim)
        .map(|&l| (l, 0.0))
        .collect();
    for row in rows {
        for (l, v) in row {
            *sums.entry(l).or_default() += v;
        }
    }
    let len = window.len() as f64;
    let mut ranking: Vec<AnomalyScore> = sums.into_iter().map(|(node, s)| AnomalyScore { node, mean: s / len }).collect();
    ranking.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(ranking)
}
