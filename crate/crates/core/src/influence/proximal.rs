use serde::{Deserialize, Serialize};

use super::eval_grad;
use crate::data::EvalSet;
use crate::engine::TrainingTrace;
use crate::error::{Error, Result};

/// Denominators at or below this magnitude make a reciprocity ratio undefined.
pub const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximalInfluence {
    pub value: f64,
    /// False when `k` does not receive from `j` at `t`; the value is then 0.
    pub neighbor: bool,
}

fn check(trace: &TrainingTrace, nodes: &[usize], t: usize) -> Result<()> {
    if let Some(&bad) = nodes.iter().find(|&&x| x >= trace.n()) {
        return Err(Error::Config(format!("node {bad} out of range")));
    }
    if t >= trace.rounds() {
        return Err(Error::Range {
            needed: t + 1,
            rounds: trace.rounds(),
        });
    }
    Ok(())
}

/// What node `j`'s update at `t` does to node `k` one gossip step later:
/// `q_k W^t_{kj} ∇L'(θ_k^{t+1})ᵀ Δ_j` with `Δ_j = −η ∇L(θ_j^t; z_j^t)`.
pub fn proximal_influence(
    trace: &TrainingTrace,
    j: usize,
    k: usize,
    t: usize,
    eval: &EvalSet,
) -> Result<ProximalInfluence> {
    check(trace, &[j, k], t)?;
    let wkj = trace.mixing_at(t).get(k, j);
    if wkj == 0.0 {
        return Ok(ProximalInfluence {
            value: 0.0,
            neighbor: false,
        });
    }
    let theta = trace.params(t)?;
    let delta = trace.displacement(t, j, &theta[j])?;
    let g = eval_grad(trace.model(), &trace.params(t + 1)?[k], &eval.refs())?;
    Ok(ProximalInfluence {
        value: trace.q()[k] * (wkj * g.dot(&delta)),
        neighbor: true,
    })
}

/// Proximal influence on `victim` of every other sender at `t`, ascending by sender.
pub fn proximal_inflow(trace: &TrainingTrace, victim: usize, t: usize, eval: &EvalSet) -> Result<Vec<(usize, f64)>> {
    check(trace, &[victim], t)?;
    let w = trace.mixing_at(t);
    let theta = trace.params(t)?;
    let g = eval_grad(trace.model(), &trace.params(t + 1)?[victim], &eval.refs())?;
    let qv = trace.q()[victim];
    trace
        .topology()
        .in_neighbors(victim)
        .iter()
        .filter(|&&l| l != victim && w.get(victim, l) != 0.0)
        .map(|&l| {
            let delta = trace.displacement(t, l, &theta[l])?;
            Ok((l, qv * (w.get(victim, l) * g.dot(&delta))))
        })
        .collect()
}

fn ratio(numerator: f64, denominator: f64) -> Result<f64> {
    if denominator.abs() <= RATIO_EPS || !denominator.is_finite() {
        return Err(Error::UndefinedRatio { numerator, denominator });
    }
    Ok(numerator / denominator)
}

/// Influence of `j` on `k` over influence of `k` on `j` at iteration `t`.
pub fn reciprocity_proximal(trace: &TrainingTrace, j: usize, k: usize, t: usize, eval: &EvalSet) -> Result<f64> {
    let num = proximal_influence(trace, j, k, t, eval)?.value;
    let den = proximal_influence(trace, k, j, t, eval)?.value;
    ratio(num, den)
}

/// Total influence `j` sends to its receivers over the total it takes from
/// its senders, self excluded on both sides.
pub fn reciprocity_neighborhood(trace: &TrainingTrace, j: usize, t: usize, eval: &EvalSet) -> Result<f64> {
    check(trace, &[j], t)?;
    let mut out = 0.0;
    for &k in trace.topology().out_neighbors(j) {
        if k != j {
            out += proximal_influence(trace, j, k, t, eval)?.value;
        }
    }
    let inflow: f64 = proximal_inflow(trace, j, t, eval)?.iter().map(|(_, v)| v).sum();
    ratio(out, inflow)
}
