use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use super::eval_grad;
use crate::data::EvalSet;
use crate::engine::TrainingTrace;
use crate::error::Result;
use crate::model::DenseMatrix;
use crate::topology::DEFAULT_PATH_CAP;

/// Brute-force walk sum for small models: every walk's curvature product is
/// formed as an explicit d×d matrix from dense Hessians. Returns the per-hop
/// sums for a whole-update removal at `(j, t)`.
pub fn dense_path_oracle(trace: &TrainingTrace, j: usize, t: usize, r: usize, eval: &EvalSet) -> Result<Vec<f64>> {
    let model = trace.model();
    let d = model.d();
    let ev = eval.refs();
    let theta = trace.params(t)?;
    let delta = trace.displacement(t, j, &theta[j])?;
    let mut factors: BTreeMap<(usize, usize), DenseMatrix> = BTreeMap::new();
    let mut per_hop = Vec::with_capacity(r + 1);
    for rho in 0..=r {
        let end_params = trace.params(t + rho)?;
        let mut sum = 0.0;
        for walk in trace.topology().enumerate_paths(j, rho, DEFAULT_PATH_CAP)?.sequences {
            let mut weight = 1.0;
            let mut prev = j;
            for (s, &k) in walk.iter().enumerate() {
                weight *= trace.mixing_at(t + s).get(k, prev);
                prev = k;
            }
            let mut m = DenseMatrix::identity(d);
            for (s, &k) in walk.iter().enumerate().take(rho.saturating_sub(1)) {
                let hop = s + 1;
                if let Entry::Vacant(e) = factors.entry((hop, k)) {
                    let h = model.dense_hessian(&trace.params(t + hop)?[k], &trace.batch(t + hop, k))?;
                    e.insert(DenseMatrix::identity(d).combine(1.0, &h, -trace.lr(t + hop)));
                }
                m = factors[&(hop, k)].matmul(&m);
            }
            let end = walk.last().copied().unwrap_or(j);
            let g = eval_grad(model, &end_params[end], &ev)?;
            sum += trace.q()[end] * weight * g.dot(&m.mul_vec(&delta));
        }
        per_hop.push(sum);
    }
    Ok(per_hop)
}
