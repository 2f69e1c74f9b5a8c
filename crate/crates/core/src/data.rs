//! Node shards, synthetic data, batch sampling and anomaly injection.

use std::fs::File;
use std::io;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Label, Sample};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset for node {node} is empty")]
    Empty { node: usize },
    #[error("sample {index} has {got} features, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("label flipping needs at least two classes and class labels")]
    NoValidFlip,
    #[error("flip fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
    #[error("noise variance must be non-negative and finite, got {0}")]
    Variance(f64),
    #[error("batch of {size} requested from {available} samples")]
    BatchTooLarge { size: usize, available: usize },
    #[error("invalid synthetic data parameters: {0}")]
    Synth(&'static str),
    #[error("csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How a node's shard was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorruptionTag {
    #[default]
    Clean,
    LabelFlip { fraction: f64, seed: u64 },
    FeatureNoise { variance: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    pub node: usize,
    pub samples: Vec<Sample>,
    pub corruption: CorruptionTag,
}

impl NodeDataset {
    pub fn new(node: usize, samples: Vec<Sample>) -> Result<Self, DataError> {
        check_samples(node, &samples)?;
        Ok(Self {
            node,
            samples,
            corruption: CorruptionTag::Clean,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.samples[0].features.len()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }
}

fn check_samples(node: usize, samples: &[Sample]) -> Result<(), DataError> {
    let first = samples.first().ok_or(DataError::Empty { node })?;
    let expected = first.features.len();
    for (index, s) in samples.iter().enumerate() {
        if s.features.len() != expected {
            return Err(DataError::Dimension {
                index,
                expected,
                got: s.features.len(),
            });
        }
    }
    Ok(())
}

/// Held-out instances the influence losses are averaged over.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub samples: Vec<Sample>,
}

impl EvalSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self, DataError> {
        check_samples(usize::MAX, &samples)?;
        Ok(Self { samples })
    }

    pub fn refs(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub per_node: usize,
    pub dims: usize,
    pub classes: usize,
    pub eval_size: usize,
    /// Standard deviation of the class means around the origin.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Within-class standard deviation.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_separation() -> f64 {
    2.0
}

fn default_spread() -> f64 {
    1.0
}

/// Gaussian class clusters. Every node and the eval set draw from their own
/// stream, so shards are independent of each other and of the node count.
pub fn synth_classification(cfg: &SynthConfig, seed: u64) -> Result<(Vec<NodeDataset>, EvalSet), DataError> {
    if cfg.nodes == 0 || cfg.per_node == 0 || cfg.dims == 0 || cfg.eval_size == 0 {
        return Err(DataError::Synth("counts must be positive"));
    }
    if cfg.classes < 2 {
        return Err(DataError::Synth("need at least two classes"));
    }
    if !(cfg.separation.is_finite() && cfg.spread.is_finite() && cfg.separation >= 0.0 && cfg.spread >= 0.0) {
        return Err(DataError::Synth("separation and spread must be finite and non-negative"));
    }
    let mut mean_rng = StreamKey::new(seed, Purpose::Synth, u32::MAX as usize).rng();
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.dims)
                .map(|_| cfg.separation * mean_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let draw = |stream: usize, count: usize| -> Vec<Sample> {
        let mut rng = StreamKey::new(seed, Purpose::Synth, stream).rng();
        (0..count)
            .map(|_| {
                let c = rng.random_range(0..cfg.classes);
                let x = means[c]
                    .iter()
                    .map(|m| m + cfg.spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Sample::new(x, Label::Class(c))
            })
            .collect()
    };
    let shards = (0..cfg.nodes)
        .map(|k| NodeDataset::new(k, draw(k, cfg.per_node)))
        .collect::<Result<Vec<_>, _>>()?;
    let eval = EvalSet::new(draw(u32::MAX as usize - 1, cfg.eval_size))?;
    Ok((shards, eval))
}

/// Replace a `fraction` of labels by a uniformly drawn different class.
pub fn flip_labels(d: &NodeDataset, fraction: f64, seed: u64, classes: usize) -> Result<NodeDataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    if classes < 2 || d.samples.iter().any(|s| s.label.class().is_none()) {
        return Err(DataError::NoValidFlip);
    }
    let mut rng = StreamKey::new(seed, Purpose::LabelFlip, d.node).rng();
    let count = ((fraction * d.len() as f64).round() as usize).clamp(1, d.len());
    let mut chosen = index::sample(&mut rng, d.len(), count).into_vec();
    chosen.sort_unstable();
    let mut out = d.clone();
    for i in chosen {
        let old = out.samples[i].label.class().expect("checked class labels");
        if old >= classes {
            return Err(DataError::NoValidFlip);
        }
        let mut new = rng.random_range(0..classes - 1);
        if new >= old {
            new += 1;
        }
        out.samples[i].label = Label::Class(new);
    }
    out.corruption = CorruptionTag::LabelFlip { fraction, seed };
    Ok(out)
}

/// Add i.i.d. `N(0, variance)` to every feature.
pub fn add_feature_noise(d: &NodeDataset, variance: f64, seed: u64) -> Result<NodeDataset, DataError> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(DataError::Variance(variance));
    }
    let mut out = d.clone();
    out.corruption = CorruptionTag::FeatureNoise { variance, seed };
    if variance == 0.0 {
        return Ok(out);
    }
    let noise = Normal::new(0.0, variance.sqrt()).expect("valid std");
    let mut rng = StreamKey::new(seed, Purpose::FeatureNoise, d.node).rng();
    for s in &mut out.samples {
        for x in &mut s.features {
            *x += noise.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Draw `size` distinct indices from the shard.
pub fn sample_batch<'a, R: Rng>(
    d: &'a NodeDataset,
    size: usize,
    rng: &mut R,
) -> Result<(Vec<&'a Sample>, Vec<usize>), DataError> {
    if size > d.len() || size == 0 {
        return Err(DataError::BatchTooLarge {
            size,
            available: d.len(),
        });
    }
    let idx = index::sample(rng, d.len(), size).into_vec();
    Ok((d.select(&idx), idx))
}

/// Batch indices of `node` at iteration `t`: each epoch is a fresh
/// permutation of the shard cut into `len / batch` consecutive slots.
pub fn epoch_batch(seed: u64, node: usize, shard_len: usize, batch: usize, t: usize) -> Result<Vec<usize>, DataError> {
    if batch == 0 || batch > shard_len {
        return Err(DataError::BatchTooLarge {
            size: batch,
            available: shard_len,
        });
    }
    let steps = shard_len / batch;
    let (epoch, slot) = (t / steps, t % steps);
    let mut perm: Vec<usize> = (0..shard_len).collect();
    perm.shuffle(&mut StreamKey::new(seed, Purpose::Batch, node).with_epoch(epoch).rng());
    Ok(perm[slot * batch..(slot + 1) * batch].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    Class,
    Target,
}

/// Header row, feature columns, label column last.
pub fn load_csv(path: &Path, kind: LabelKind) -> Result<Vec<Sample>, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let fields: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::Parse {
                line,
                msg: e.to_string(),
            })?;
        let (&label, features) = fields.split_last().ok_or(DataError::Parse {
            line,
            msg: "empty row".into(),
        })?;
        let label = match kind {
            LabelKind::Target => Label::Target(label),
            LabelKind::Class if label >= 0.0 && label.fract() == 0.0 => Label::Class(label as usize),
            LabelKind::Class => {
                return Err(DataError::Parse {
                    line,
                    msg: format!("class label {label} is not a non-negative integer"),
                })
            }
        };
        out.push(Sample::new(features.to_vec(), label));
    }
    check_samples(usize::MAX, &out)?;
    Ok(out)
}

pub fn export_csv(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let dims = samples.first().map_or(0, |s| s.features.len());
    let mut header: Vec<String> = (0..dims).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for s in samples {
        let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
        row.push(match s.label {
            Label::Class(c) => c.to_string(),
            Label::Target(v) => v.to_string(),
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
