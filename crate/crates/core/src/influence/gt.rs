use std::collections::BTreeSet;

use rayon::prelude::*;

use super::{eval_loss, Accumulator, HopAttribution, InfluenceQuery, InfluenceReport};
use crate::data::EvalSet;
use crate::engine::{counterfactual_branch, TrainingTrace};
use crate::error::{Error, Result};

fn hop_set(trace: &TrainingTrace, j: usize, s: usize, hops: HopAttribution) -> Result<BTreeSet<usize>> {
    Ok(match hops {
        HopAttribution::Reachable => trace.topology().walk_reach(j, s)?,
        HopAttribution::ShortestPath => trace.topology().r_hop_neighbors(j, s)?,
    })
}

/// Counterfactual influence within `query.radius` hops.
///
/// Hop 0 is the loss change at the origin's own half step. Hop `s` sums
/// `q_k (L(θ_k^{t+s}) − L(θ_{k∖}^{t+s}))` over the hop-`s` set, with the
/// branch replayed under common random numbers.
pub fn dice_gt(trace: &TrainingTrace, query: &InfluenceQuery, eval: &EvalSet) -> Result<InfluenceReport> {
    query.check(trace)?;
    let (j, t, r) = (query.node, query.iteration, query.radius);
    let model = trace.model();
    let ev = eval.refs();
    let q = trace.q();

    let theta = trace.params(t)?;
    let factual_half = theta[j].add(&trace.displacement(t, j, &theta[j])?);
    let removal = query.removal();
    let branch = if r > 0 {
        Some(counterfactual_branch(trace, removal, r - 1)?)
    } else {
        None
    };
    let cf_half = match &branch {
        Some(b) => b.half.clone(),
        None => trace.removed_half_step(&removal)?,
    };

    let mut acc = Accumulator::new(r, 1);
    let direct = eval_loss(model, &factual_half, &ev)? - eval_loss(model, &cf_half, &ev)?;
    acc.add(0, j, &[q[j] * direct]);

    if let Some(branch) = branch {
        for s in 1..=r {
            let fact = trace.params(t + s)?;
            let cf = branch.at(t + s).ok_or(Error::MissingSnapshot(t + s))?;
            let nodes: Vec<usize> = hop_set(trace, j, s, query.hops)?.into_iter().collect();
            let terms = nodes
                .par_iter()
                .map(|&k| {
                    if fact[k] == cf[k] {
                        return Ok(0.0);
                    }
                    let gap = eval_loss(model, &fact[k], &ev)? - eval_loss(model, &cf[k], &ev)?;
                    Ok(q[k] * gap)
                })
                .collect::<Result<Vec<f64>>>()?;
            for (&k, v) in nodes.iter().zip(terms) {
                acc.add(s, k, &[v]);
            }
        }
    }
    Ok(acc.finish(*query, None))
}
