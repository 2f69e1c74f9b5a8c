//! Influence of one node's update on the network.
//!
//! Sign convention everywhere: a negative value means the data lowered the
//! evaluation loss. Ground truth compares the factual run with a replayed
//! branch; the estimates propagate the update's displacement along walks of
//! the communication graph.

mod estimate;
mod gt;
mod loo;
mod oracle;
mod proximal;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{RemovalSpec, RemovalUnit, TrainingTrace};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector, Sample};

pub use estimate::{dice_e_batch_additivity, dice_e_one_hop, dice_e_per_sample, dice_e_r_hop, dice_e_two_hop};
pub use gt::dice_gt;
pub use loo::{loo_influence, loo_retrain};
pub use oracle::dense_path_oracle;
pub use proximal::{
    proximal_inflow, proximal_influence, reciprocity_neighborhood, reciprocity_proximal, ProximalInfluence,
    RATIO_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Gt,
    Estimate,
}

/// Which nodes ground truth charges to hop `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HopAttribution {
    /// Endpoints of length-`s` walks, the origin included through its self-loop.
    #[default]
    Reachable,
    /// Nodes at shortest-path distance exactly `s`.
    ShortestPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceQuery {
    pub node: usize,
    pub iteration: usize,
    #[serde(default = "whole_update")]
    pub unit: RemovalUnit,
    pub radius: usize,
    pub estimator: Estimator,
    #[serde(default)]
    pub hops: HopAttribution,
    /// Also split the estimate over the samples of the batch.
    #[serde(default)]
    pub per_sample: bool,
}

fn whole_update() -> RemovalUnit {
    RemovalUnit::WholeUpdate
}

impl InfluenceQuery {
    pub fn new(node: usize, iteration: usize, radius: usize, estimator: Estimator) -> Self {
        Self {
            node,
            iteration,
            unit: RemovalUnit::WholeUpdate,
            radius,
            estimator,
            hops: HopAttribution::Reachable,
            per_sample: false,
        }
    }

    pub fn removal(&self) -> RemovalSpec {
        RemovalSpec {
            node: self.node,
            iteration: self.iteration,
            unit: self.unit,
        }
    }

    fn check(&self, trace: &TrainingTrace) -> Result<()> {
        if self.node >= trace.n() {
            return Err(Error::Config(format!("node {} out of range", self.node)));
        }
        if self.iteration + self.radius > trace.rounds() || self.iteration >= trace.rounds() {
            return Err(Error::Range {
                needed: self.iteration + self.radius.max(1),
                rounds: trace.rounds(),
            });
        }
        if let RemovalUnit::SingleSample(i) = self.unit {
            if !trace.batch_indices(self.iteration, self.node).contains(&i) {
                return Err(Error::Config(format!("sample {i} is not in the queried batch")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub query: InfluenceQuery,
    pub total: f64,
    pub per_hop: Vec<f64>,
    pub per_node: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<BTreeMap<usize, f64>>,
}

impl InfluenceReport {
    pub fn write_json(&self, path: &Path, force: bool) -> Result<()> {
        let mut f = create(path, force)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// One row per hop, node and sample contribution, then the total.
    pub fn write_csv(&self, path: &Path, force: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(create(path, force)?);
        w.write_record(["kind", "index", "value"]).map_err(csv_err)?;
        let mut row = |kind: &str, index: String, value: f64| w.write_record([kind, &index, &value.to_string()]);
        for (rho, v) in self.per_hop.iter().enumerate() {
            row("hop", rho.to_string(), *v).map_err(csv_err)?;
        }
        for (k, v) in &self.per_node {
            row("node", k.to_string(), *v).map_err(csv_err)?;
        }
        for (i, v) in self.per_sample.iter().flatten() {
            row("sample", i.to_string(), *v).map_err(csv_err)?;
        }
        row("total", String::new(), self.total).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.into())
}

/// Open `path` for writing; an existing file needs `force`.
pub fn create(path: &Path, force: bool) -> Result<File> {
    if path.exists() && !force {
        return Err(Error::Trace(format!("{} exists; pass force to overwrite", path.display())));
    }
    Ok(File::create(path)?)
}

pub(crate) fn eval_loss(model: &ModelSpec, theta: &ParamVector, eval: &[&Sample]) -> Result<f64> {
    Ok(model.loss(theta, eval)?)
}

pub(crate) fn eval_grad(model: &ModelSpec, theta: &ParamVector, eval: &[&Sample]) -> Result<ParamVector> {
    Ok(model.gradient(theta, eval)?)
}

/// Order-fixed accumulation of hop, node and channel contributions.
/// Channel 0 is the whole displacement; further channels are per-sample.
pub(crate) struct Accumulator {
    per_hop: Vec<Vec<f64>>,
    per_node: Vec<BTreeMap<usize, f64>>,
}

impl Accumulator {
    pub fn new(radius: usize, channels: usize) -> Self {
        Self {
            per_hop: vec![vec![0.0; radius + 1]; channels],
            per_node: vec![BTreeMap::new(); channels],
        }
    }

    pub fn add(&mut self, rho: usize, node: usize, values: &[f64]) {
        for (c, &v) in values.iter().enumerate() {
            self.per_hop[c][rho] += v;
            *self.per_node[c].entry(node).or_insert(0.0) += v;
        }
    }

    fn channel(&self, c: usize, query: InfluenceQuery) -> InfluenceReport {
        let per_hop = self.per_hop[c].clone();
        InfluenceReport {
            query,
            total: per_hop.iter().sum(),
            per_hop,
            per_node: self.per_node[c].clone(),
            per_sample: None,
        }
    }

    /// Channel 0 as the report, channels `1..` keyed by `samples`.
    pub fn finish(&self, query: InfluenceQuery, samples: Option<&[usize]>) -> InfluenceReport {
        let mut report = self.channel(0, query);
        if let Some(idx) = samples {
            report.per_sample = Some(
                idx.iter()
                    .enumerate()
                    .map(|(c, &i)| (i, self.per_hop[c + 1].iter().sum()))
                    .collect(),
            );
        }
        report
    }

    /// Reports of channels `1..`, each with its own sample as removal unit.
    pub fn sample_reports(&self, query: InfluenceQuery, samples: &[usize]) -> Vec<InfluenceReport> {
        samples
            .iter()
            .enumerate()
            .map(|(c, &i)| {
                let q = InfluenceQuery {
                    unit: RemovalUnit::SingleSample(i),
                    per_sample: false,
                    ..query
                };
                self.channel(c + 1, q)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
