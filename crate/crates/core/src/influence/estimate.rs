use std::borrow::Cow;
use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::{eval_grad, Accumulator, Estimator, InfluenceQuery, InfluenceReport};
use crate::data::EvalSet;
use crate::engine::{RemovalUnit, TrainingTrace};
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::topology::DEFAULT_PATH_CAP;

/// The displacement(s) being propagated: channel 0 is the query's own unit,
/// followed by one channel per batch sample when requested.
fn displacements(
    trace: &TrainingTrace,
    query: &InfluenceQuery,
    theta: &ParamVector,
) -> Result<(Vec<ParamVector>, Option<Vec<usize>>)> {
    let (j, t) = (query.node, query.iteration);
    let idx = trace.batch_indices(t, j);
    let scale = -trace.lr(t) / idx.len() as f64;
    let sample_disp = |positions: &[usize]| -> Result<Vec<ParamVector>> {
        let samples: Vec<_> = positions.iter().map(|&p| &trace.shards()[j].samples[idx[p]]).collect();
        Ok(trace
            .model()
            .per_sample_gradients(theta, &samples)?
            .into_iter()
            .map(|g| g.scaled(scale))
            .collect())
    };
    match query.unit {
        RemovalUnit::WholeUpdate => {
            let mut vecs = vec![trace.displacement(t, j, theta)?];
            if !query.per_sample {
                return Ok((vecs, None));
            }
            let all: Vec<usize> = (0..idx.len()).collect();
            vecs.extend(sample_disp(&all)?);
            Ok((vecs, Some(idx.to_vec())))
        }
        RemovalUnit::SingleSample(i) => {
            let p = idx.iter().position(|&x| x == i).expect("checked membership");
            Ok((sample_disp(&[p])?, None))
        }
    }
}

struct Walker<'a> {
    trace: &'a TrainingTrace,
    t: usize,
    r: usize,
    params: Vec<Cow<'a, [ParamVector]>>,
    /// Test-loss gradient at `(hop, node)`, i.e. at θ_node^{t+hop}.
    grads: BTreeMap<(usize, usize), ParamVector>,
}

type Contribution = (usize, usize, Vec<f64>);

impl<'a> Walker<'a> {
    fn new(trace: &'a TrainingTrace, query: &InfluenceQuery, eval: &EvalSet) -> Result<Self> {
        let (j, t, r) = (query.node, query.iteration, query.radius);
        for rho in 1..=r {
            trace.topology().check_path_budget(j, rho, DEFAULT_PATH_CAP)?;
        }
        let params = (0..=r).map(|s| trace.params(t + s)).collect::<Result<Vec<_>>>()?;
        let mut wanted = Vec::new();
        for rho in 0..=r {
            let reach: BTreeSet<usize> = trace.topology().walk_reach(j, rho)?;
            wanted.extend(reach.into_iter().map(|k| (rho, k)));
        }
        let ev = eval.refs();
        let values = wanted
            .par_iter()
            .map(|&(rho, k)| eval_grad(trace.model(), &params[rho][k], &ev))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trace,
            t,
            r,
            params,
            grads: wanted.into_iter().zip(values).collect(),
        })
    }

    fn grad(&self, hop: usize, k: usize) -> &ParamVector {
        &self.grads[&(hop, k)]
    }

    fn term(&self, hop: usize, k: usize, weight: f64, vecs: &[ParamVector]) -> Vec<f64> {
        let g = self.grad(hop, k);
        let qk = self.trace.q()[k];
        vecs.iter().map(|v| qk * (weight * g.dot(v))).collect()
    }

    /// `(I − η^{t+s} H(θ_k^{t+s}; z_k^{t+s})) v` for every channel.
    fn curve(&self, k: usize, s: usize, vecs: &[ParamVector]) -> Result<Vec<ParamVector>> {
        let batch = self.trace.batch(self.t + s, k);
        let eta = self.trace.lr(self.t + s);
        let theta = &self.params[s][k];
        vecs.iter()
            .map(|v| {
                let hv = self.trace.model().hvp(theta, &batch, v)?;
                Ok(v.sub(&hv.scaled(eta)))
            })
            .collect()
    }

    fn children(&self, k: usize, s: usize) -> Vec<(usize, f64)> {
        let w = self.trace.mixing_at(self.t + s);
        self.trace
            .topology()
            .out_neighbors(k)
            .iter()
            .map(|&k2| (k2, w.get(k2, k)))
            .filter(|&(_, wk)| wk != 0.0)
            .collect()
    }

    // Depth-first over walks; a prefix's propagated vectors are shared by
    // every walk extending it.
    fn visit(&self, k: usize, s: usize, weight: f64, vecs: &[ParamVector], out: &mut Vec<Contribution>) -> Result<()> {
        out.push((s, k, self.term(s, k, weight, vecs)));
        if s == self.r {
            return Ok(());
        }
        let curved;
        let next: &[ParamVector] = if s == 0 {
            vecs
        } else {
            curved = self.curve(k, s, vecs)?;
            &curved
        };
        for (k2, wk) in self.children(k, s) {
            self.visit(k2, s + 1, weight * wk, next, out)?;
        }
        Ok(())
    }

    fn run(&self, j: usize, vecs: &[ParamVector]) -> Result<Vec<Contribution>> {
        let mut out = vec![(0, j, self.term(0, j, 1.0, vecs))];
        if self.r == 0 {
            return Ok(out);
        }
        let subtrees = self
            .children(j, 0)
            .par_iter()
            .map(|&(k, wk)| {
                let mut sub = Vec::new();
                self.visit(k, 1, wk, vecs, &mut sub)?;
                Ok(sub)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(subtrees.into_iter().flatten());
        Ok(out)
    }
}

fn as_estimate(query: &InfluenceQuery, radius: usize) -> InfluenceQuery {
    InfluenceQuery {
        radius,
        estimator: Estimator::Estimate,
        ..*query
    }
}

fn walk_sum(
    trace: &TrainingTrace,
    query: &InfluenceQuery,
    eval: &EvalSet,
) -> Result<(Accumulator, Option<Vec<usize>>)> {
    query.check(trace)?;
    let walker = Walker::new(trace, query, eval)?;
    let (vecs, samples) = displacements(trace, query, &walker.params[0][query.node])?;
    let mut acc = Accumulator::new(query.radius, vecs.len());
    for (rho, k, values) in walker.run(query.node, &vecs)? {
        acc.add(rho, k, &values);
    }
    Ok((acc, samples))
}

/// Sum over walks of length `0..=r` from the origin of
/// `q_end · Π W · ∇L'(θ_end^{t+ρ})ᵀ Π(I − ηH) Δ`, with the curvature taken at
/// each intermediate node in temporal order.
pub fn dice_e_r_hop(trace: &TrainingTrace, query: &InfluenceQuery, eval: &EvalSet) -> Result<InfluenceReport> {
    let query = as_estimate(query, query.radius);
    let (acc, samples) = walk_sum(trace, &query, eval)?;
    Ok(acc.finish(query, samples.as_deref()))
}

/// One report per sample of the queried batch, each for that sample's share
/// `−η ∇L(θ; z_i) / |B|` of the update.
pub fn dice_e_per_sample(trace: &TrainingTrace, query: &InfluenceQuery, eval: &EvalSet) -> Result<Vec<InfluenceReport>> {
    let query = InfluenceQuery {
        unit: RemovalUnit::WholeUpdate,
        per_sample: true,
        ..as_estimate(query, query.radius)
    };
    let (acc, samples) = walk_sum(trace, &query, eval)?;
    Ok(acc.sample_reports(query, samples.as_deref().unwrap_or_default()))
}

/// Direct term plus one term per receiving neighbor (the origin itself
/// included when it keeps weight on its own model).
pub fn dice_e_one_hop(trace: &TrainingTrace, query: &InfluenceQuery, eval: &EvalSet) -> Result<InfluenceReport> {
    let query = as_estimate(query, 1);
    query.check(trace)?;
    let (j, t) = (query.node, query.iteration);
    let ev = eval.refs();
    let model = trace.model();
    let q = trace.q();
    let now = trace.params(t)?;
    let next = trace.params(t + 1)?;
    let (vecs, samples) = displacements(trace, &query, &now[j])?;
    let dots = |g: &ParamVector, scale: f64, qk: f64| -> Vec<f64> { vecs.iter().map(|v| qk * (scale * g.dot(v))).collect() };

    let mut acc = Accumulator::new(1, vecs.len());
    acc.add(0, j, &dots(&eval_grad(model, &now[j], &ev)?, 1.0, q[j]));
    let w = trace.mixing_at(t);
    for &k in trace.topology().out_neighbors(j) {
        let wkj = w.get(k, j);
        if wkj == 0.0 {
            continue;
        }
        acc.add(1, k, &dots(&eval_grad(model, &next[k], &ev)?, wkj, q[k]));
    }
    Ok(acc.finish(query, samples.as_deref()))
}

/// One-hop estimate plus the two-hop correction
/// `q_l W^{t+1}_{lk} W^t_{kj} (∇L'(θ_l^{t+2})ᵀΔ − η^{t+1} ∇L'(θ_l^{t+2})ᵀ H(θ_k^{t+1}; z_k^{t+1}) Δ)`.
pub fn dice_e_two_hop(trace: &TrainingTrace, query: &InfluenceQuery, eval: &EvalSet) -> Result<InfluenceReport> {
    let query = as_estimate(query, 2);
    query.check(trace)?;
    let (j, t) = (query.node, query.iteration);
    let ev = eval.refs();
    let model = trace.model();
    let topo = trace.topology();
    let q = trace.q();
    let p0 = trace.params(t)?;
    let p1 = trace.params(t + 1)?;
    let p2 = trace.params(t + 2)?;
    let (vecs, samples) = displacements(trace, &query, &p0[j])?;
    let (w0, w1) = (trace.mixing_at(t), trace.mixing_at(t + 1));
    let eta1 = trace.lr(t + 1);

    let mut acc = Accumulator::new(2, vecs.len());
    let g0 = eval_grad(model, &p0[j], &ev)?;
    acc.add(0, j, &vecs.iter().map(|v| q[j] * g0.dot(v)).collect::<Vec<_>>());
    let hop1: Vec<(usize, f64)> = topo
        .out_neighbors(j)
        .iter()
        .map(|&k| (k, w0.get(k, j)))
        .filter(|&(_, w)| w != 0.0)
        .collect();
    for &(k, wkj) in &hop1 {
        let g = eval_grad(model, &p1[k], &ev)?;
        acc.add(1, k, &vecs.iter().map(|v| q[k] * (wkj * g.dot(v))).collect::<Vec<_>>());
    }
    let mut g2: BTreeMap<usize, ParamVector> = BTreeMap::new();
    for &(k, wkj) in &hop1 {
        let batch = trace.batch(t + 1, k);
        let hd = vecs
            .iter()
            .map(|v| model.hvp(&p1[k], &batch, v))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for &l in topo.out_neighbors(k) {
            let wlk = w1.get(l, k);
            if wlk == 0.0 {
                continue;
            }
            if let Entry::Vacant(e) = g2.entry(l) {
                e.insert(eval_grad(model, &p2[l], &ev)?);
            }
            let g = &g2[&l];
            let weight = wkj * wlk;
            let values: Vec<f64> = vecs
                .iter()
                .zip(&hd)
                .map(|(v, h)| q[l] * (weight * (g.dot(v) - eta1 * g.dot(h))))
                .collect();
            acc.add(2, l, &values);
        }
    }
    Ok(acc.finish(query, samples.as_deref()))
}

/// Sum of per-sample reports from one batch.
pub fn dice_e_batch_additivity(reports: &[InfluenceReport]) -> Result<InfluenceReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Provenance("no reports to combine".into()))?;
    let fq = &first.query;
    let mut seen = BTreeSet::new();
    for r in reports {
        let q = &r.query;
        if q.estimator != Estimator::Estimate
            || (q.node, q.iteration, q.radius, q.hops) != (fq.node, fq.iteration, fq.radius, fq.hops)
            || r.per_hop.len() != first.per_hop.len()
        {
            return Err(Error::Provenance(format!(
                "report for node {} iteration {} radius {} does not match node {} iteration {} radius {}",
                q.node, q.iteration, q.radius, fq.node, fq.iteration, fq.radius
            )));
        }
        match q.unit {
            RemovalUnit::SingleSample(i) if seen.insert(i) => {}
            RemovalUnit::SingleSample(i) => {
                return Err(Error::Provenance(format!("sample {i} appears twice")));
            }
            RemovalUnit::WholeUpdate => {
                return Err(Error::Provenance("only single-sample reports can be combined".into()));
            }
        }
    }
    let mut per_hop = vec![0.0; first.per_hop.len()];
    let mut per_node = BTreeMap::new();
    let mut per_sample = BTreeMap::new();
    for r in reports {
        for (acc, v) in per_hop.iter_mut().zip(&r.per_hop) {
            *acc += v;
        }
        for (&k, v) in &r.per_node {
            *per_node.entry(k).or_insert(0.0) += v;
        }
        if let RemovalUnit::SingleSample(i) = r.query.unit {
            per_sample.insert(i, r.total);
        }
    }
    Ok(InfluenceReport {
        query: InfluenceQuery {
            unit: RemovalUnit::WholeUpdate,
            per_sample: true,
            ..*fq
        },
        total: per_hop.iter().sum(),
        per_hop,
        per_node,
        per_sample: Some(per_sample),
    })
}
