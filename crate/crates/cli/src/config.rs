//! The JSON run configuration and its translation into training inputs.

use std::path::{Path, PathBuf};

use dice_core::data::{
    add_feature_noise, flip_labels, load_csv, synth_classification, EvalSet, LabelKind, NodeDataset, SynthConfig,
};
use dice_core::engine::{InitPolicy, LrSchedule, MixingSchedule, SnapshotPolicy, TrainConfig, TrainingInputs};
use dice_core::influence::InfluenceQuery;
use dice_core::model::ModelSpec;
use dice_core::topology::{dominant_node_mixing, MixingMatrix, Topology};
use dice_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads, 0 for all cores. `DICE_THREADS` takes precedence.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub topology: TopologySpec,
    #[serde(default)]
    pub mixing: MixingSpec,
    pub train: TrainSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        per_node: usize,
        dims: usize,
        classes: usize,
        eval_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<f64>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        corrupt: Vec<Corruption>,
    },
    Csv {
        /// One file per node, in node order.
        shards: Vec<PathBuf>,
        eval: PathBuf,
        labels: LabelKind,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        corrupt: Vec<Corruption>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Corruption {
    LabelFlip {
        node: usize,
        #[serde(default = "one")]
        fraction: f64,
    },
    FeatureNoise {
        node: usize,
        variance: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySpec {
    Ring { n: usize },
    Exponential { n: usize },
    FullyConnected { n: usize },
    /// Edges read off the support of a matrix file.
    Matrix { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixingSpec {
    #[default]
    Uniform,
    File { path: PathBuf },
    /// `W^t` is file `t mod len`.
    Sequence { paths: Vec<PathBuf> },
    /// `node` feeds every other node with `weight` on top of the base graph.
    Dominant { node: usize, weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub rounds: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub snapshots: SnapshotPolicy,
    #[serde(default)]
    pub init: InitPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentSpec {
    Alignment {
        trials: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_pearson: Option<f64>,
    },
    Anomaly {
        victim: usize,
        /// Half-open iteration range; the whole run when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<(usize, usize)>,
    },
    Cascade {
        stem: usize,
        iterations: Vec<usize>,
        /// Inject the first `count` samples of `node`'s shard instead of the stem's own batch.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inject: Option<Injection>,
        /// Second stem to compare total out-influence against.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        compare: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_ratio: Option<f64>,
    },
    InfluenceQuery {
        query: InfluenceQuery,
    },
}

impl ExperimentSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentSpec::Alignment { .. } => "alignment",
            ExperimentSpec::Anomaly { .. } => "anomaly",
            ExperimentSpec::Cascade { .. } => "cascade",
            ExperimentSpec::InfluenceQuery { .. } => "influence-query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub node: usize,
    pub count: usize,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid("config", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Relative paths inside the config are taken relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSpec::Csv { shards, eval, .. } = &mut self.data {
            shards.iter_mut().for_each(fix);
            fix(eval);
        }
        if let TopologySpec::Matrix { path } = &mut self.topology {
            fix(path);
        }
        match &mut self.mixing {
            MixingSpec::File { path } => fix(path),
            MixingSpec::Sequence { paths } => paths.iter_mut().for_each(fix),
            _ => {}
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.train.rounds,
            lr: self.train.lr.clone(),
            batch_size: self.train.batch_size,
            q: self.train.q.clone(),
            seed: self.seed,
            snapshots: self.train.snapshots.clone(),
            init: self.train.init,
        }
    }

    fn graph(&self) -> Result<Topology> {
        let t = match &self.topology {
            TopologySpec::Ring { n } => Topology::ring(*n),
            TopologySpec::Exponential { n } => Topology::exponential(*n),
            TopologySpec::FullyConnected { n } => Topology::fully_connected(*n),
            TopologySpec::Matrix { path } => MixingMatrix::load(path).map(|w| Topology::from_mixing(&w)),
        };
        t.map_err(|e| invalid("topology", e))
    }

    fn topology_and_mixing(&self) -> Result<(Topology, MixingSchedule)> {
        let topo = self.graph()?;
        let load = |p: &Path| MixingMatrix::load(p).map_err(|e| invalid("mixing", format!("{}: {e}", p.display())));
        Ok(match &self.mixing {
            MixingSpec::Uniform => {
                let w = MixingMatrix::uniform(&topo);
                (topo, w.into())
            }
            MixingSpec::File { path } => (topo, load(path)?.into()),
            MixingSpec::Sequence { paths } => {
                if paths.is_empty() {
                    return Err(invalid("mixing.paths", "at least one matrix is required"));
                }
                let ws = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
                (topo, MixingSchedule::Sequence(ws))
            }
            MixingSpec::Dominant { node, weight } => {
                let (t, w) = dominant_node_mixing(&topo, *node, *weight).map_err(|e| invalid("mixing", e))?;
                (t, w.into())
            }
        })
    }

    fn datasets(&self, n: usize) -> Result<(Vec<NodeDataset>, EvalSet)> {
        let (mut shards, eval, corrupt) = match &self.data {
            DataSpec::Synthetic {
                per_node,
                dims,
                classes,
                eval_size,
                separation,
                spread,
                corrupt,
            } => {
                let cfg = SynthConfig {
                    nodes: n,
                    per_node: *per_node,
                    dims: *dims,
                    classes: *classes,
                    eval_size: *eval_size,
                    separation: separation.unwrap_or(2.0),
                    spread: spread.unwrap_or(1.0),
                };
                let (s, e) = synth_classification(&cfg, self.seed).map_err(|e| invalid("data", e))?;
                (s, e, corrupt)
            }
            DataSpec::Csv {
                shards,
                eval,
                labels,
                corrupt,
            } => {
                if shards.len() != n {
                    return Err(invalid("data.shards", format!("{} files for {n} nodes", shards.len())));
                }
                let read = |p: &Path| load_csv(p, *labels).map_err(|e| invalid("data", format!("{}: {e}", p.display())));
                let s = shards
                    .iter()
                    .enumerate()
                    .map(|(k, p)| NodeDataset::new(k, read(p)?).map_err(|e| invalid("data.shards", e)))
                    .collect::<Result<Vec<_>>>()?;
                let e = EvalSet::new(read(eval)?).map_err(|e| invalid("data.eval", e))?;
                (s, e, corrupt)
            }
        };
        let classes = self.model.output_dim();
        for (i, c) in corrupt.iter().enumerate() {
            let stream = self.seed.wrapping_add(i as u64);
            match *c {
                Corruption::LabelFlip { node, fraction } => {
                    let d = shards.get(node).ok_or_else(|| invalid("data.corrupt", format!("node {node} out of range")))?;
                    shards[node] = flip_labels(d, fraction, stream, classes).map_err(|e| invalid("data.corrupt", e))?;
                }
                Corruption::FeatureNoise { node, variance } => {
                    let d = shards.get(node).ok_or_else(|| invalid("data.corrupt", format!("node {node} out of range")))?;
                    shards[node] = add_feature_noise(d, variance, stream).map_err(|e| invalid("data.corrupt", e))?;
                }
            }
        }
        Ok((shards, eval))
    }

    pub fn inputs(&self) -> Result<TrainingInputs> {
        let (topology, mixing) = self.topology_and_mixing()?;
        let (shards, eval) = self.datasets(topology.n())?;
        Ok(TrainingInputs {
            model: self.model.clone(),
            topology,
            mixing,
            shards,
            eval,
            initial: None,
        })
    }
}
