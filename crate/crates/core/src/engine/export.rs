// Trace directory: manifest.json, data/*.csv, snapshots/theta_<t>.{bin,json}.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InitPolicy, MixingSchedule, SnapshotPolicy, TrainingTrace};
use crate::data::{export_csv, load_csv, CorruptionTag, EvalSet, LabelKind, NodeDataset};
use crate::error::{Error, Result};
use crate::model::{Label, ModelKind, ModelSpec, ParamVector};
use crate::topology::{Topology, TopologyRecord};

pub const TRACE_FORMAT: &str = "dice-trace/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    model: ModelSpec,
    topology: TopologyRecord,
    mixing: MixingSchedule,
    lrs: Vec<f64>,
    q: Vec<f64>,
    batch_size: usize,
    seed: u64,
    init: InitPolicy,
    snapshot_policy: SnapshotPolicy,
    label_kind: LabelKind,
    shards: Vec<ShardEntry>,
    eval: String,
    snapshots: Vec<usize>,
    batches: Vec<Vec<Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardEntry {
    node: usize,
    file: String,
    corruption: CorruptionTag,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotSidecar {
    d: usize,
    model_kind: ModelKind,
    nodes: usize,
    iteration: usize,
}

fn snapshot_stem(t: usize) -> String {
    format!("theta_{t:06}")
}

fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Trace(format!("{} exists; pass force to overwrite", path.display())));
    }
    fs::write(path, bytes)?;
    Ok(())
}

impl TrainingTrace {
    /// Write the trace; refuses to touch an existing manifest unless `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() && !force {
            return Err(Error::Trace(format!("{} exists; pass force to overwrite", manifest_path.display())));
        }
        for sub in ["data", "snapshots"] {
            let p = dir.join(sub);
            if p.exists() && force {
                fs::remove_dir_all(&p)?;
            }
            fs::create_dir_all(&p)?;
        }
        let label_kind = match self.eval.samples[0].label {
            Label::Class(_) => LabelKind::Class,
            Label::Target(_) => LabelKind::Target,
        };
        let mut shards = Vec::with_capacity(self.n());
        for s in &self.shards {
            let file = format!("data/node_{:04}.csv", s.node);
            export_csv(&s.samples, &dir.join(&file))?;
            shards.push(ShardEntry {
                node: s.node,
                file,
                corruption: s.corruption,
            });
        }
        export_csv(&self.eval.samples, &dir.join("data/eval.csv"))?;

        for (&t, thetas) in &self.snapshots {
            let bytes: Vec<u8> = thetas.iter().flat_map(ParamVector::to_le_bytes).collect();
            let stem = snapshot_stem(t);
            fs::write(dir.join(format!("snapshots/{stem}.bin")), bytes)?;
            let side = SnapshotSidecar {
                d: self.model.d(),
                model_kind: self.model.kind(),
                nodes: self.n(),
                iteration: t,
            };
            fs::write(
                dir.join(format!("snapshots/{stem}.json")),
                serde_json::to_vec_pretty(&side)?,
            )?;
        }

        let manifest = Manifest {
            format: TRACE_FORMAT.into(),
            model: self.model.clone(),
            topology: TopologyRecord::from(&self.topology),
            mixing: self.mixing.clone(),
            lrs: self.lrs.clone(),
            q: self.q.clone(),
            batch_size: self.batch_size,
            seed: self.seed,
            init: self.init,
            snapshot_policy: self.policy.clone(),
            label_kind,
            shards,
            eval: "data/eval.csv".into(),
            snapshots: self.snapshot_iterations(),
            batches: self.batches.clone(),
        };
        write_new(&manifest_path, &serde_json::to_vec(&manifest)?, force)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if m.format != TRACE_FORMAT {
            return Err(Error::Trace(format!("unsupported format {:?}", m.format)));
        }
        let topology = Topology::try_from(m.topology)?;
        let n = topology.n();
        let rounds = m.lrs.len();
        if m.shards.len() != n || m.q.len() != n || m.batches.len() != rounds {
            return Err(Error::Trace("manifest sizes disagree with the topology".into()));
        }
        let mut shards = Vec::with_capacity(n);
        for (k, e) in m.shards.iter().enumerate() {
            if e.node != k {
                return Err(Error::Trace(format!("shard entry {k} names node {}", e.node)));
            }
            let mut d = NodeDataset::new(k, load_csv(&dir.join(&e.file), m.label_kind)?)?;
            d.corruption = e.corruption;
            shards.push(d);
        }
        let eval = EvalSet::new(load_csv(&dir.join(&m.eval), m.label_kind)?)?;
        for (t, per_node) in m.batches.iter().enumerate() {
            let ok = per_node.len() == n
                && per_node
                    .iter()
                    .zip(&shards)
                    .all(|(b, s)| b.len() == m.batch_size && b.iter().all(|&i| i < s.len()));
            if !ok {
                return Err(Error::Trace(format!("batch record at iteration {t} is invalid")));
            }
        }

        let d = m.model.d();
        let mut snapshots = BTreeMap::new();
        for &t in &m.snapshots {
            let stem = snapshot_stem(t);
            let side: SnapshotSidecar = serde_json::from_slice(&fs::read(dir.join(format!("snapshots/{stem}.json")))?)?;
            if side.d != d || side.nodes != n || side.iteration != t || side.model_kind != m.model.kind() {
                return Err(Error::Trace(format!("sidecar of snapshot {t} disagrees with the manifest")));
            }
            let bytes = fs::read(dir.join(format!("snapshots/{stem}.bin")))?;
            if bytes.len() != n * d * 8 {
                return Err(Error::Trace(format!("snapshot {t} has {} bytes, expected {}", bytes.len(), n * d * 8)));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let thetas = values.chunks_exact(d.max(1)).take(n).map(|c| ParamVector(c.to_vec())).collect();
            snapshots.insert(t, thetas);
        }
        if !snapshots.contains_key(&0) || !snapshots.contains_key(&rounds) {
            return Err(Error::Trace("snapshots must include the first and last iteration".into()));
        }

        Ok(TrainingTrace {
            model: m.model,
            topology,
            mixing: m.mixing,
            lrs: m.lrs,
            q: m.q,
            batch_size: m.batch_size,
            seed: m.seed,
            init: m.init,
            policy: m.snapshot_policy,
            shards,
            eval,
            batches: m.batches,
            snapshots,
        })
    }
}
