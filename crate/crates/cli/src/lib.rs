//! Command implementations behind the `dice` binary.
//!
//! Every command is a pure function of its config and inputs: outputs carry
//! no timestamps and never depend on the worker count.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dice_core::analysis::{cascade_map, detect_anomaly, run_alignment, verify_numerics, CascadeMap};
use dice_core::data::CorruptionTag;
use dice_core::engine::{run_training, RemovalUnit, TrainingTrace};
use dice_core::influence::{create, dice_e_r_hop, dice_gt, Estimator, HopAttribution, InfluenceQuery, InfluenceReport};
use dice_core::model::ModelSpec;
use dice_core::{parallel, Error, Result};
use serde::Serialize;

pub use config::{ExperimentSpec, RunConfig};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
/// I/O failures that are not the config's fault.
pub const EXIT_IO: i32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        e if e.is_budget() => EXIT_BUDGET,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

/// `DICE_THREADS` if set, otherwise `configured`.
pub fn thread_count(configured: usize) -> Result<usize> {
    match std::env::var("DICE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DICE_THREADS: not a thread count: {v:?}"))),
        Err(_) => Ok(configured),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn train(cfg: &RunConfig, threads: usize) -> Result<TrainingTrace> {
    run_training(&cfg.train_config(), cfg.inputs()?, threads)
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<TrainingTrace> {
    let cfg = load_config(config, seed)?;
    let threads = thread_count(cfg.threads)?;
    let trace = parallel::install(threads, || train(&cfg, threads))?;
    trace.save(out, force)?;
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct InfluenceArgs {
    pub node: usize,
    pub iteration: usize,
    pub radius: usize,
    pub estimator: Estimator,
    pub hops: HopAttribution,
    pub per_sample: bool,
    /// Remove only this shard sample instead of the whole update.
    pub sample: Option<usize>,
}

impl InfluenceArgs {
    pub fn query(&self) -> InfluenceQuery {
        InfluenceQuery {
            node: self.node,
            iteration: self.iteration,
            unit: self.sample.map_or(RemovalUnit::WholeUpdate, RemovalUnit::SingleSample),
            radius: self.radius,
            estimator: self.estimator,
            hops: self.hops,
            per_sample: self.per_sample,
        }
    }
}

fn run_query(trace: &TrainingTrace, q: &InfluenceQuery) -> Result<InfluenceReport> {
    match q.estimator {
        Estimator::Gt => dice_gt(trace, q, trace.eval()),
        Estimator::Estimate => dice_e_r_hop(trace, q, trace.eval()),
    }
}

fn report_stem(q: &InfluenceQuery) -> String {
    let est = match q.estimator {
        Estimator::Gt => "gt",
        Estimator::Estimate => "estimate",
    };
    let unit = match q.unit {
        RemovalUnit::WholeUpdate => String::new(),
        RemovalUnit::SingleSample(i) => format!("-s{i}"),
    };
    format!("influence-{est}-n{}-t{}-r{}{unit}", q.node, q.iteration, q.radius)
}

fn write_report(rep: &InfluenceReport, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let stem = report_stem(&rep.query);
    let json = out.join(format!("{stem}.json"));
    let csv = out.join(format!("{stem}.csv"));
    rep.write_json(&json, force)?;
    rep.write_csv(&csv, force)?;
    Ok(vec![json, csv])
}

pub fn cmd_influence(trace_dir: &Path, args: &InfluenceArgs, out: &Path, force: bool) -> Result<InfluenceReport> {
    let threads = thread_count(0)?;
    let trace = TrainingTrace::load(trace_dir)?;
    let rep = parallel::install(threads, || run_query(&trace, &args.query()))?;
    write_report(&rep, out, force)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub kind: String,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
}

impl ExperimentSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path, force: bool) -> Result<()> {
    let mut f = create(path, force)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Serialize)]
struct RankRow {
    rank: usize,
    node: usize,
    mean_proximal: f64,
    corrupted: bool,
}

pub fn cmd_experiment(
    config: &Path,
    kind: &str,
    out: &Path,
    seed: Option<u64>,
    force: bool,
) -> Result<ExperimentSummary> {
    let cfg = load_config(config, seed)?;
    let spec = cfg
        .experiment
        .clone()
        .ok_or_else(|| Error::Config("experiment: block missing from config".into()))?;
    if spec.name() != kind {
        return Err(Error::Config(format!("experiment.kind: config holds {}, asked for {kind}", spec.name())));
    }
    let threads = thread_count(cfg.threads)?;
    fs::create_dir_all(out)?;
    parallel::install(threads, || {
        let trace = train(&cfg, threads)?;
        let eval = trace.eval();
        let mut files = Vec::new();
        let mut checks = Vec::new();
        match &spec {
            ExperimentSpec::Alignment { trials, min_pearson } => {
                let res = run_alignment(&trace, eval, *trials, cfg.seed)?;
                let (csv, json) = (out.join("alignment.csv"), out.join("alignment.json"));
                res.write_csv(&csv, force)?;
                res.write_json(&json, force)?;
                files.extend([csv, json]);
                if let Some(min) = min_pearson {
                    checks.push(Check {
                        name: "pearson".into(),
                        value: res.pearson,
                        threshold: *min,
                        pass: res.pearson >= *min,
                    });
                }
            }
            ExperimentSpec::Anomaly { victim, window } => {
                let range = window.map_or(0..trace.rounds(), |(a, b)| a..b);
                let ranking = detect_anomaly(&trace, *victim, eval, range)?;
                let rows: Vec<RankRow> = ranking
                    .iter()
                    .enumerate()
                    .map(|(i, s)| RankRow {
                        rank: i + 1,
                        node: s.node,
                        mean_proximal: s.mean,
                        corrupted: trace.shards()[s.node].corruption != CorruptionTag::Clean,
                    })
                    .collect();
                let csv = out.join("ranking.csv");
                let mut w = csv::Writer::from_writer(create(&csv, force)?);
                for r in &rows {
                    w.serialize(r).map_err(|e| Error::Data(e.into()))?;
                }
                w.flush()?;
                let json = out.join("ranking.json");
                write_json(&rows, &json, force)?;
                files.extend([csv, json]);
                if rows.iter().any(|r| r.corrupted) {
                    let top = rows.first().is_some_and(|r| r.corrupted);
                    checks.push(Check {
                        name: "corrupted sender ranked first".into(),
                        value: f64::from(u8::from(top)),
                        threshold: 1.0,
                        pass: top,
                    });
                }
            }
            ExperimentSpec::Cascade {
                stem,
                iterations,
                inject,
                compare,
                min_ratio,
            } => {
                if iterations.is_empty() {
                    return Err(Error::Config("experiment.iterations: at least one iteration is required".into()));
                }
                let injected = match inject {
                    Some(inj) => {
                        let shard = trace
                            .shards()
                            .get(inj.node)
                            .ok_or_else(|| Error::Config(format!("experiment.inject.node: {} out of range", inj.node)))?;
                        if inj.count == 0 || inj.count > shard.len() {
                            return Err(Error::Config(format!("experiment.inject.count: {} not in 1..={}", inj.count, shard.len())));
                        }
                        Some(shard.samples[..inj.count].to_vec())
                    }
                    None => None,
                };
                let maps = |node: usize| -> Result<Vec<CascadeMap>> {
                    iterations.iter().map(|&t| cascade_map(&trace, node, t, eval, injected.as_deref())).collect()
                };
                let mine = maps(*stem)?;
                let path = out.join(format!("cascade-{stem}.json"));
                write_json(&mine, &path, force)?;
                files.push(path);
                if let Some(other) = compare {
                    let theirs = maps(*other)?;
                    let path = out.join(format!("cascade-{other}.json"));
                    write_json(&theirs, &path, force)?;
                    files.push(path);
                    let a: f64 = mine.iter().map(CascadeMap::out_influence).sum();
                    let b: f64 = theirs.iter().map(CascadeMap::out_influence).sum();
                    let ratio = a / b;
                    if let Some(min) = min_ratio {
                        checks.push(Check {
                            name: format!("out-influence ratio {stem}/{other}"),
                            value: ratio,
                            threshold: *min,
                            pass: ratio > *min,
                        });
                    }
                }
            }
            ExperimentSpec::InfluenceQuery { query } => {
                let rep = run_query(&trace, query)?;
                files.extend(write_report(&rep, out, force)?);
            }
        }
        let summary = ExperimentSummary {
            kind: kind.into(),
            files: files.iter().map(|p| file_name(p)).collect(),
            checks,
        };
        write_json(&summary, &out.join("summary.json"), force)?;
        Ok(summary)
    })
}

/// Finite-difference and step-halving checks over a fixed model family.
pub fn cmd_verify(seeds: usize, out: &Path, force: bool) -> Result<bool> {
    let specs = vec![
        ModelSpec::scalar_quadratic(),
        ModelSpec::linear_regression(4, 1),
        ModelSpec::logistic_regression(5, 3)?,
        ModelSpec::mlp(vec![5, 6, 3], Default::default(), dice_core::model::LossKind::CrossEntropy)?,
    ];
    let seeds: Vec<u64> = (1..=seeds as u64).collect();
    let threads = thread_count(0)?;
    let report = parallel::install(threads, || verify_numerics(&specs, &seeds))?;
    write_json(&report, out, force)?;
    Ok(report.passed())
}
