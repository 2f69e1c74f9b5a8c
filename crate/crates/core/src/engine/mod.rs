//! Decentralized training (local SGD step, then gossip) with a replayable
//! trace, and counterfactual branches that drop one update.

mod export;

use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batch, EvalSet, NodeDataset};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector, Sample};
use crate::parallel;
use crate::rng::{Purpose, StreamKey};
use crate::topology::{MixingMatrix, Topology};

pub use export::TRACE_FORMAT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSchedule {
    Constant(f64),
    PerIteration(Vec<f64>),
}

impl LrSchedule {
    fn expand(&self, rounds: usize) -> Result<Vec<f64>> {
        let lrs = match self {
            LrSchedule::Constant(v) => vec![*v; rounds],
            LrSchedule::PerIteration(v) if v.len() == rounds => v.clone(),
            LrSchedule::PerIteration(v) => {
                return Err(Error::Config(format!(
                    "lr schedule has {} entries for {rounds} rounds",
                    v.len()
                )))
            }
        };
        if let Some(bad) = lrs.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("learning rate must be positive, got {bad}")));
        }
        Ok(lrs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SnapshotPolicy {
    /// Keep θ^t for every iteration.
    #[default]
    All,
    /// Keep only the named iterations (plus the first and last); anything
    /// else is recomputed from the nearest earlier snapshot on demand.
    Iterations { iterations: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Every node starts from the same draw.
    #[default]
    Shared,
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    /// Node weights in the objective; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    pub seed: u64,
    #[serde(default)]
    pub snapshots: SnapshotPolicy,
    #[serde(default)]
    pub init: InitPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingSchedule {
    Static(MixingMatrix),
    /// `W^t` is entry `t mod len`.
    Sequence(Vec<MixingMatrix>),
}

impl MixingSchedule {
    pub fn at(&self, t: usize) -> &MixingMatrix {
        match self {
            MixingSchedule::Static(w) => w,
            MixingSchedule::Sequence(ws) => &ws[t % ws.len()],
        }
    }

    fn matrices(&self) -> &[MixingMatrix] {
        match self {
            MixingSchedule::Static(w) => std::slice::from_ref(w),
            MixingSchedule::Sequence(ws) => ws,
        }
    }
}

impl From<MixingMatrix> for MixingSchedule {
    fn from(w: MixingMatrix) -> Self {
        MixingSchedule::Static(w)
    }
}

/// Everything a run consumes besides its config.
#[derive(Debug, Clone)]
pub struct TrainingInputs {
    pub model: ModelSpec,
    pub topology: Topology,
    pub mixing: MixingSchedule,
    pub shards: Vec<NodeDataset>,
    pub eval: EvalSet,
    /// Explicit starting parameters; drawn from the seed when absent.
    pub initial: Option<Vec<ParamVector>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    model: ModelSpec,
    topology: Topology,
    mixing: MixingSchedule,
    lrs: Vec<f64>,
    q: Vec<f64>,
    batch_size: usize,
    seed: u64,
    init: InitPolicy,
    policy: SnapshotPolicy,
    shards: Vec<NodeDataset>,
    eval: EvalSet,
    /// `batches[t][k]`: shard indices node `k` trained on at iteration `t`.
    batches: Vec<Vec<Vec<usize>>>,
    /// θ^t of every node, keyed by `t`; always holds 0 and `rounds`.
    snapshots: BTreeMap<usize, Vec<ParamVector>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "kebab-case")]
pub enum RemovalUnit {
    WholeUpdate,
    /// Shard index of one sample in the recorded batch.
    SingleSample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalSpec {
    pub node: usize,
    pub iteration: usize,
    pub unit: RemovalUnit,
}

impl RemovalSpec {
    pub fn whole(node: usize, iteration: usize) -> Self {
        Self {
            node,
            iteration,
            unit: RemovalUnit::WholeUpdate,
        }
    }
}

/// Parameters of the run with one update removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub removal: RemovalSpec,
    /// The removed node's half step at the removal iteration.
    pub half: ParamVector,
    /// `params[s]` holds θ^{t+1+s} for every node.
    pub params: Vec<Vec<ParamVector>>,
}

impl Branch {
    /// Counterfactual θ of all nodes at `iteration`, if the branch covers it.
    pub fn at(&self, iteration: usize) -> Option<&[ParamVector]> {
        iteration
            .checked_sub(self.removal.iteration + 1)
            .and_then(|s| self.params.get(s))
            .map(Vec::as_slice)
    }
}

fn validate_q(q: Option<&Vec<f64>>, n: usize) -> Result<Vec<f64>> {
    let q = match q {
        None => return Ok(vec![1.0 / n as f64; n]),
        Some(q) => q.clone(),
    };
    if q.len() != n {
        return Err(Error::Config(format!("q has {} entries for {n} nodes", q.len())));
    }
    if q.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Config("q entries must be non-negative".into()));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("q sums to {sum}, expected 1")));
    }
    Ok(q)
}

fn check_finite(v: &ParamVector, t: usize, k: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { t, k })
    }
}

/// `Σ_j W[k][j] x_j` in ascending `j`, skipping zero weights. The first
/// term seeds the sum, so identity and single-source rows copy exactly.
pub(crate) fn gossip_row(w: &MixingMatrix, k: usize, xs: &[ParamVector]) -> ParamVector {
    let mut acc: Option<ParamVector> = None;
    for (j, &wkj) in w.row(k).iter().enumerate() {
        if wkj == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(xs[j].scaled(wkj)),
            Some(a) => a.axpy(wkj, &xs[j]),
        }
    }
    acc.unwrap_or_else(|| ParamVector::zeros(xs[k].len()))
}

pub fn run_training(cfg: &TrainConfig, inputs: TrainingInputs, threads: usize) -> Result<TrainingTrace> {
    let TrainingInputs {
        model,
        topology,
        mixing,
        shards,
        eval,
        initial,
    } = inputs;
    let n = topology.n();
    if shards.len() != n {
        return Err(Error::Config(format!("{} shards for {n} nodes", shards.len())));
    }
    if cfg.rounds == 0 {
        return Err(Error::Config("rounds must be positive".into()));
    }
    for (k, s) in shards.iter().enumerate() {
        if s.dims() != model.input_dim() {
            return Err(Error::Config(format!(
                "shard {k} has {} features, model expects {}",
                s.dims(),
                model.input_dim()
            )));
        }
        if cfg.batch_size == 0 || cfg.batch_size > s.len() {
            return Err(Error::Config(format!(
                "batch size {} does not fit shard {k} of {} samples",
                cfg.batch_size,
                s.len()
            )));
        }
    }
    if eval.samples[0].features.len() != model.input_dim() {
        return Err(Error::Config("eval features do not match the model input".into()));
    }
    for w in mixing.matrices() {
        if w.n() != n {
            return Err(Error::Config(format!("mixing matrix is {0}x{0} for {n} nodes", w.n())));
        }
        w.check_support(&topology)?;
    }
    let lrs = cfg.lr.expand(cfg.rounds)?;
    let q = validate_q(cfg.q.as_ref(), n)?;

    let theta0 = match initial {
        Some(v) => {
            if v.len() != n || v.iter().any(|p| p.len() != model.d()) {
                return Err(Error::Config("initial parameters do not match nodes and model".into()));
            }
            v
        }
        None => (0..n)
            .map(|k| {
                let stream = if cfg.init == InitPolicy::Shared { 0 } else { k };
                model.init_params(&mut StreamKey::new(cfg.seed, Purpose::Init, stream).rng())
            })
            .collect(),
    };

    let batches = (0..cfg.rounds)
        .map(|t| {
            shards
                .iter()
                .enumerate()
                .map(|(k, s)| epoch_batch(cfg.seed, k, s.len(), cfg.batch_size, t))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let keep: Option<Vec<usize>> = match &cfg.snapshots {
        SnapshotPolicy::All => None,
        SnapshotPolicy::Iterations { iterations } => Some(iterations.clone()),
    };

    let mut trace = TrainingTrace {
        model,
        topology,
        mixing,
        lrs,
        q,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        init: cfg.init,
        policy: cfg.snapshots.clone(),
        shards,
        eval,
        batches,
        snapshots: BTreeMap::new(),
    };
    parallel::install(threads, || {
        let mut theta = theta0;
        trace.snapshots.insert(0, theta.clone());
        for t in 0..cfg.rounds {
            theta = trace.advance(t, &theta, None)?;
            let stored = t + 1 == cfg.rounds || keep.as_ref().is_none_or(|k| k.contains(&(t + 1)));
            if stored {
                trace.snapshots.insert(t + 1, theta.clone());
            }
        }
        Ok::<(), Error>(())
    })?;
    Ok(trace)
}

impl TrainingTrace {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn mixing(&self) -> &MixingSchedule {
        &self.mixing
    }

    pub fn mixing_at(&self, t: usize) -> &MixingMatrix {
        self.mixing.at(t)
    }

    pub fn n(&self) -> usize {
        self.topology.n()
    }

    pub fn rounds(&self) -> usize {
        self.lrs.len()
    }

    pub fn lrs(&self) -> &[f64] {
        &self.lrs
    }

    pub fn lr(&self, t: usize) -> f64 {
        self.lrs[t]
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init_policy(&self) -> InitPolicy {
        self.init
    }

    pub fn snapshot_policy(&self) -> &SnapshotPolicy {
        &self.policy
    }

    pub fn shards(&self) -> &[NodeDataset] {
        &self.shards
    }

    pub fn eval(&self) -> &EvalSet {
        &self.eval
    }

    pub fn batch_indices(&self, t: usize, k: usize) -> &[usize] {
        &self.batches[t][k]
    }

    pub fn batch(&self, t: usize, k: usize) -> Vec<&Sample> {
        self.shards[k].select(&self.batches[t][k])
    }

    pub fn snapshot_iterations(&self) -> Vec<usize> {
        self.snapshots.keys().copied().collect()
    }

    pub fn final_params(&self) -> &[ParamVector] {
        &self.snapshots[&self.rounds()]
    }

    /// Same objective weights, renormalized; used by ranking invariance checks.
    pub fn with_q(&self, q: Vec<f64>) -> Result<Self> {
        let q = validate_q(Some(&q), self.n())?;
        Ok(Self { q, ..self.clone() })
    }

    /// θ^t of every node, recomputed from the nearest earlier snapshot if needed.
    pub fn params(&self, t: usize) -> Result<Cow<'_, [ParamVector]>> {
        if t > self.rounds() {
            return Err(Error::Range {
                needed: t,
                rounds: self.rounds(),
            });
        }
        if let Some(p) = self.snapshots.get(&t) {
            return Ok(Cow::Borrowed(p));
        }
        let (&start, base) = self.snapshots.range(..t).next_back().ok_or(Error::MissingSnapshot(t))?;
        let mut theta = base.clone();
        for s in start..t {
            theta = self.advance(s, &theta, None)?;
        }
        Ok(Cow::Owned(theta))
    }

    /// `O(θ_k^t, z_k^t) − θ_k^t` for the recorded batch.
    pub fn displacement(&self, t: usize, k: usize, theta: &ParamVector) -> Result<ParamVector> {
        Ok(self.model.sgd_displacement(theta, &self.batch(t, k), self.lrs[t])?)
    }

    /// One round from θ^t: local steps, then gossip. `replace` overrides one
    /// node's half step.
    pub(crate) fn advance(
        &self,
        t: usize,
        theta: &[ParamVector],
        replace: Option<(usize, &ParamVector)>,
    ) -> Result<Vec<ParamVector>> {
        let half: Vec<ParamVector> = (0..self.n())
            .into_par_iter()
            .map(|k| match replace {
                Some((j, h)) if j == k => Ok(h.clone()),
                _ => {
                    let h = theta[k].add(&self.displacement(t, k, &theta[k])?);
                    check_finite(&h, t, k)?;
                    Ok(h)
                }
            })
            .collect::<Result<_>>()?;
        let w = self.mixing.at(t);
        let next: Vec<ParamVector> = (0..self.n()).into_par_iter().map(|k| gossip_row(w, k, &half)).collect();
        for (k, p) in next.iter().enumerate() {
            check_finite(p, t, k)?;
        }
        Ok(next)
    }

    fn check_removal(&self, r: &RemovalSpec) -> Result<()> {
        if r.node >= self.n() {
            return Err(Error::Config(format!("node {} out of range", r.node)));
        }
        if r.iteration >= self.rounds() {
            return Err(Error::Range {
                needed: r.iteration + 1,
                rounds: self.rounds(),
            });
        }
        if let RemovalUnit::SingleSample(i) = r.unit {
            if !self.batches[r.iteration][r.node].contains(&i) {
                return Err(Error::Config(format!(
                    "sample {i} is not in the batch of node {} at iteration {}",
                    r.node, r.iteration
                )));
            }
        }
        Ok(())
    }

    /// The removed node's half step in the counterfactual run.
    pub fn removed_half_step(&self, removal: &RemovalSpec) -> Result<ParamVector> {
        self.check_removal(removal)?;
        match removal.unit {
            RemovalUnit::WholeUpdate => Ok(self.params(removal.iteration)?[removal.node].clone()),
            RemovalUnit::SingleSample(i) => single_sample_removal_update(self, removal.node, removal.iteration, i),
        }
    }
}

/// Replay iterations `t..=t+s_max` with the update at `(j, t)` removed,
/// reusing every recorded batch, matrix and step size.
pub fn counterfactual_branch(trace: &TrainingTrace, removal: RemovalSpec, s_max: usize) -> Result<Branch> {
    trace.check_removal(&removal)?;
    let t = removal.iteration;
    if t + s_max >= trace.rounds() {
        return Err(Error::Range {
            needed: t + s_max + 1,
            rounds: trace.rounds(),
        });
    }
    let half = trace.removed_half_step(&removal)?;
    let start = trace.params(t)?;
    let mut params = Vec::with_capacity(s_max + 1);
    params.push(trace.advance(t, &start, Some((removal.node, &half)))?);
    for s in 1..=s_max {
        let next = trace.advance(t + s, &params[s - 1], None)?;
        params.push(next);
    }
    Ok(Branch { removal, half, params })
}

/// Node `j`'s half step at `t` with the batch mean taken over the batch minus
/// shard sample `index`. A batch of one leaves θ_j^t unchanged.
pub fn single_sample_removal_update(trace: &TrainingTrace, j: usize, t: usize, index: usize) -> Result<ParamVector> {
    trace.check_removal(&RemovalSpec {
        node: j,
        iteration: t,
        unit: RemovalUnit::SingleSample(index),
    })?;
    let theta = trace.params(t)?[j].clone();
    let rest: Vec<usize> = trace.batch_indices(t, j).iter().copied().filter(|&i| i != index).collect();
    if rest.is_empty() {
        return Ok(theta);
    }
    let batch = trace.shards[j].select(&rest);
    let disp = trace.model.sgd_displacement(&theta, &batch, trace.lrs[t])?;
    Ok(theta.add(&disp))
}
