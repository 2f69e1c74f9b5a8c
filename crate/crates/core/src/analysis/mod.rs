//! Experiment harnesses built on top of the influence engine.

mod anomaly;
mod cascade;
mod numerics;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EvalSet;
use crate::engine::TrainingTrace;
use crate::error::{Error, Result};
use crate::influence::{create, dice_e_one_hop, dice_e_r_hop, dice_gt, Estimator, InfluenceQuery};
use crate::rng::{Purpose, StreamKey};

pub use anomaly::{detect_anomaly, AnomalyScore};
pub use cascade::{cascade_map, CascadeMap};
pub use numerics::{
    check_model, taylor_residual_study, verify_numerics, CheckStatus, NumericsEntry, NumericsReport, TaylorStudy,
    KINK_MARGIN,
};

fn moments(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Statistics(format!("need two equal-length samples, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    Ok((sxy, sxx, syy))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (sxy, sxx, syy) = moments(xs, ys)?;
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Statistics("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, tied values sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut end = i + 1;
        while end < order.len() && xs[order[end]] == xs[order[i]] {
            end += 1;
        }
        let r = (i + end + 1) as f64 / 2.0;
        for &o in &order[i..end] {
            ranks[o] = r;
        }
        i = end;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub node: usize,
    pub iteration: usize,
    pub gt: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub pairs: Vec<AlignmentPair>,
    pub pearson: f64,
    pub spearman: f64,
    pub mean_abs_gap: f64,
}

impl AlignmentResult {
    pub fn from_pairs(pairs: Vec<AlignmentPair>) -> Result<Self> {
        let gt: Vec<f64> = pairs.iter().map(|p| p.gt).collect();
        let est: Vec<f64> = pairs.iter().map(|p| p.estimate).collect();
        let pearson = pearson(&gt, &est)?;
        let spearman = spearman(&gt, &est)?;
        let mean_abs_gap = pairs.iter().map(|p| (p.gt - p.estimate).abs()).sum::<f64>() / pairs.len() as f64;
        Ok(Self {
            pairs,
            pearson,
            spearman,
            mean_abs_gap,
        })
    }

    /// One row per trial: node, iteration, gt, estimate.
    pub fn write_csv(&self, path: &Path, force: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(create(path, force)?);
        w.write_record(["node", "iteration", "gt", "estimate"])
            .map_err(|e| Error::Trace(e.to_string()))?;
        for p in &self.pairs {
            w.write_record([
                p.node.to_string(),
                p.iteration.to_string(),
                format!("{:e}", p.gt),
                format!("{:e}", p.estimate),
            ])
            .map_err(|e| Error::Trace(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary without the pairs.
    pub fn write_json(&self, path: &Path, force: bool) -> Result<()> {
        let summary = serde_json::json!({
            "trials": self.pairs.len(),
            "pearson": self.pearson,
            "spearman": self.spearman,
            "mean_abs_gap": self.mean_abs_gap,
        });
        let mut f = create(path, force)?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        writeln!(f)?;
        Ok(())
    }
}

/// `(node, iteration)` pairs for `trials` comparisons. Trial `i` draws its
/// iteration from epoch `i mod epochs`, so every epoch is covered before
/// any is revisited; nodes are uniform.
pub fn trial_schedule(trace: &TrainingTrace, trials: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let rounds = trace.rounds();
    if rounds == 0 {
        return Err(Error::Range { needed: 1, rounds });
    }
    let shortest = trace.shards().iter().map(|s| s.len()).min().unwrap_or(0);
    let per_epoch = (shortest / trace.batch_size()).max(1);
    let epochs = rounds.div_ceil(per_epoch);
    let mut rng = StreamKey::new(seed, Purpose::Trials, 0).rng();
    Ok((0..trials)
        .map(|i| {
            let e = i % epochs;
            let lo = e * per_epoch;
            let hi = ((e + 1) * per_epoch).min(rounds);
            let t = rng.random_range(lo..hi);
            let j = rng.random_range(0..trace.n());
            (j, t)
        })
        .collect())
}

/// One-hop ground truth against the one-hop estimate for whole-update
/// removals at scheduled `(node, iteration)` pairs.
pub fn run_alignment(trace: &TrainingTrace, eval: &EvalSet, trials: usize, seed: u64) -> Result<AlignmentResult> {
    if trials < 2 {
        return Err(Error::Config(format!("alignment needs at least 2 trials, got {trials}")));
    }
    let schedule = trial_schedule(trace, trials, seed)?;
    let pairs = schedule
        .par_iter()
        .map(|&(j, t)| {
            let gt = dice_gt(trace, &InfluenceQuery::new(j, t, 1, Estimator::Gt), eval)?.total;
            let estimate = dice_e_one_hop(trace, &InfluenceQuery::new(j, t, 1, Estimator::Estimate), eval)?.total;
            Ok(AlignmentPair {
                node: j,
                iteration: t,
                gt,
                estimate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AlignmentResult::from_pairs(pairs)
}

/// Mean of `|per_hop[ρ]|` over the queries, for `ρ = 0..=radius`.
pub fn hop_profile(trace: &TrainingTrace, queries: &[(usize, usize)], radius: usize, eval: &EvalSet) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Config("no queries".into()));
    }
    let reports = queries
        .par_iter()
        .map(|&(j, t)| dice_e_r_hop(trace, &InfluenceQuery::new(j, t, radius, Estimator::Estimate), eval))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; radius + 1];
    for r in &reports {
        for (m, v) in mean.iter_mut().zip(&r.per_hop) {
            *m += v.abs();
        }
    }
    Ok(mean.into_iter().map(|m| m / reports.len() as f64).collect())
}
