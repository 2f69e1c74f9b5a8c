use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EvalSet;
use crate::engine::TrainingTrace;
use crate::error::{Error, Result};
use crate::influence::{create, eval_grad};
use crate::model::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeMap {
    pub stem: usize,
    pub iteration: usize,
    /// One-hop estimate per node: direct plus self-loop term on the stem,
    /// the proximal term on every receiver.
    pub scores: BTreeMap<usize, f64>,
    /// Shortest-path distance from the stem, reachable nodes only.
    pub hop_rings: BTreeMap<usize, usize>,
}

impl CascadeMap {
    pub fn total(&self) -> f64 {
        self.scores.values().sum()
    }

    /// Σ |score| over every node but the stem.
    pub fn out_influence(&self) -> f64 {
        self.scores.iter().filter(|(&k, _)| k != self.stem).map(|(_, v)| v.abs()).sum()
    }

    pub fn write_json(&self, path: &Path, force: bool) -> Result<()> {
        let mut f = create(path, force)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// Spread of one batch from `stem` at iteration `t`. With `injected` the
/// displacement is recomputed from those samples at the stem's recorded
/// parameters; otherwise the recorded batch is used.
pub fn cascade_map(
    trace: &TrainingTrace,
    stem: usize,
    t: usize,
    eval: &EvalSet,
    injected: Option<&[Sample]>,
) -> Result<CascadeMap> {
    if stem >= trace.n() {
        return Err(Error::Config(format!("node {stem} out of range")));
    }
    if t >= trace.rounds() {
        return Err(Error::Range {
            needed: t + 1,
            rounds: trace.rounds(),
        });
    }
    let model = trace.model();
    let ev = eval.refs();
    let now = trace.params(t)?;
    let next = trace.params(t + 1)?;
    let delta = match injected {
        Some([]) => return Err(Error::Config("empty injected batch".into())),
        Some(batch) => {
            let refs: Vec<&Sample> = batch.iter().collect();
            model.sgd_displacement(&now[stem], &refs, trace.lr(t))?
        }
        None => trace.displacement(t, stem, &now[stem])?,
    };
    let q = trace.q();
    let w = trace.mixing_at(t);
    let mut scores = BTreeMap::new();
    scores.insert(stem, q[stem] * eval_grad(model, &now[stem], &ev)?.dot(&delta));
    for &k in trace.topology().out_neighbors(stem) {
        let wkj = w.get(k, stem);
        if wkj == 0.0 {
            continue;
        }
        let v = q[k] * (wkj * eval_grad(model, &next[k], &ev)?.dot(&delta));
        *scores.entry(k).or_insert(0.0) += v;
    }
    let hop_rings = trace
        .topology()
        .distances_from(stem)?
        .into_iter()
        .enumerate()
        .filter_map(|(k, d)| d.map(|d| (k, d)))
        .collect();
    Ok(CascadeMap {
        stem,
        iteration: t,
        scores,
        hop_rings,
    })
}
