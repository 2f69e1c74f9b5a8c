use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSet, NodeDataset};
use crate::engine::{run_training, InitPolicy, LrSchedule, SnapshotPolicy, TrainConfig, TrainingInputs};
use crate::error::{Error, Result};
use crate::influence::{dice_e_r_hop, dice_gt, Estimator, InfluenceQuery};
use crate::model::{refs, Activation, Label, LossKind, ModelKind, ModelSpec, ParamVector, Sample, DEFAULT_HESSIAN_CAP};
use crate::rng::{Purpose, StreamKey};
use crate::topology::{MixingMatrix, Topology};

/// Relu points closer than this to a kink are not finite-difference checked.
pub const KINK_MARGIN: f64 = 1e-3;

const GRAD_TOL: f64 = 1e-5;
const HVP_TOL: f64 = 1e-4;
const SYM_TOL: f64 = 1e-8;
const COLUMN_TOL: f64 = 1e-9;
const TAYLOR_BAND: (f64, f64) = (3.5, 4.5);
const BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericsEntry {
    pub check: String,
    pub subject: String,
    pub seed: u64,
    pub measured: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericsReport {
    pub entries: Vec<NumericsEntry>,
}

impl NumericsReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status != CheckStatus::Fail)
    }

    pub fn worst(&self, check: &str) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.check == check && e.status != CheckStatus::Excluded)
            .map(|e| e.measured)
            .max_by(f64::total_cmp)
    }
}

fn entry(check: &str, subject: &str, seed: u64, measured: f64, tolerance: f64, excluded: bool) -> NumericsEntry {
    let status = if excluded {
        CheckStatus::Excluded
    } else if measured < tolerance {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    NumericsEntry {
        check: check.into(),
        subject: subject.into(),
        seed,
        measured,
        tolerance,
        status,
    }
}

/// Coordinate-wise relative error; magnitudes below 1e-4 are compared absolutely at that scale.
fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_batch<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Vec<Sample> {
    (0..BATCH)
        .map(|_| {
            let x = normal(rng, spec.input_dim());
            let label = if spec.loss_kind() == LossKind::SquaredError && spec.output_dim() == 1 {
                Label::Target(rng.sample(StandardNormal))
            } else {
                Label::Class(rng.random_range(0..spec.output_dim()))
            };
            Sample::new(x, label)
        })
        .collect()
}

fn subject(spec: &ModelSpec) -> String {
    let kind = match spec.kind() {
        ModelKind::LinearRegression => "linear-regression",
        ModelKind::LogisticRegression => "logistic-regression",
        ModelKind::Mlp => "mlp",
    };
    let act = if spec.kind() == ModelKind::Mlp {
        match spec.activation() {
            Activation::Tanh => "-tanh",
            Activation::Relu => "-relu",
        }
    } else {
        ""
    };
    format!("{kind}{act} d={}", spec.d())
}

fn check_point(spec: &ModelSpec, seed: u64) -> Result<Vec<NumericsEntry>> {
    let mut rng = StreamKey::new(seed, Purpose::Trials, 1).rng();
    let batch = random_batch(spec, &mut rng);
    let mut theta = spec.init_params(&mut rng);
    for (t, z) in theta.0.iter_mut().zip(normal(&mut rng, spec.d())) {
        *t += 0.3 * z;
    }
    check_model(spec, &theta, &batch, seed)
}

/// Finite-difference and Hessian checks at one point. Relu points within
/// [`KINK_MARGIN`] of a kink are reported as excluded.
pub fn check_model(spec: &ModelSpec, theta: &ParamVector, batch: &[Sample], seed: u64) -> Result<Vec<NumericsEntry>> {
    let mut rng = StreamKey::new(seed, Purpose::Trials, 2).rng();
    let b = refs(batch);
    let theta = theta.clone();
    let name = subject(spec);
    let kinked = spec.kind() == ModelKind::Mlp
        && spec.activation() == Activation::Relu
        && spec.min_abs_preactivation(&theta, &b) < KINK_MARGIN;
    let mut out = Vec::new();

    let g = spec.gradient(&theta, &b)?;
    let h = 1e-5;
    let mut fd = ParamVector::zeros(spec.d());
    for i in 0..spec.d() {
        let mut p = theta.clone();
        p[i] += h;
        let up = spec.loss(&p, &b)?;
        p[i] -= 2.0 * h;
        let down = spec.loss(&p, &b)?;
        fd[i] = (up - down) / (2.0 * h);
    }
    out.push(entry("gradient", &name, seed, rel_err(&g, &fd), GRAD_TOL, kinked));

    let v = ParamVector(normal(&mut rng, spec.d()));
    let eps = 1e-4 * (1.0 + theta.norm()) / (1.0 + v.norm());
    let hv = spec.hvp(&theta, &b, &v)?;
    let gp = spec.gradient(&theta.add(&v.scaled(eps)), &b)?;
    let gm = spec.gradient(&theta.sub(&v.scaled(eps)), &b)?;
    let fd_hv = gp.sub(&gm).scaled(1.0 / (2.0 * eps));
    out.push(entry("hvp", &name, seed, rel_err(&hv, &fd_hv), HVP_TOL, kinked));

    if spec.d() <= DEFAULT_HESSIAN_CAP {
        let hess = spec.dense_hessian(&theta, &b)?;
        out.push(entry("hessian-symmetry", &name, seed, hess.max_asymmetry(), SYM_TOL, false));
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let u = ParamVector(normal(&mut rng, spec.d()));
            let dense = hess.mul_vec(&u);
            let free = spec.hvp(&theta, &b, &u)?;
            worst = worst.max(dense.sub(&free).max_abs() / (1.0 + free.max_abs()));
        }
        out.push(entry("hessian-hvp", &name, seed, worst, COLUMN_TOL, false));
    }
    Ok(out)
}

/// Finite-difference checks for every `(spec, seed)` pair, followed by the
/// step-size halving study on the same seeds.
pub fn verify_numerics(specs: &[ModelSpec], seeds: &[u64]) -> Result<NumericsReport> {
    let jobs: Vec<(&ModelSpec, u64)> = specs.iter().flat_map(|s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let mut entries: Vec<NumericsEntry> = jobs
        .par_iter()
        .map(|&(spec, seed)| check_point(spec, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if !seeds.is_empty() {
        let study = taylor_residual_study(seeds, &[1, 2], 0.1)?;
        for (r, median) in study.radii.iter().zip(&study.median_ratio) {
            let inside = (TAYLOR_BAND.0..=TAYLOR_BAND.1).contains(median);
            entries.push(NumericsEntry {
                check: format!("taylor-ratio r={r}"),
                subject: "3-node ring, linear least squares".into(),
                seed: seeds[0],
                measured: *median,
                tolerance: TAYLOR_BAND.1,
                status: if inside { CheckStatus::Pass } else { CheckStatus::Fail },
            });
        }
    }
    Ok(NumericsReport { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorStudy {
    pub radii: Vec<usize>,
    pub lr: f64,
    /// `gaps[seed][radius] = (|GT − E| at lr, |GT − E| at lr/2)`.
    pub gaps: Vec<Vec<(f64, f64)>>,
    pub median_ratio: Vec<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn taylor_gaps(seed: u64, radii: &[usize], lr: f64) -> Result<Vec<(f64, f64)>> {
    const DIMS: usize = 3;
    let model = ModelSpec::linear_regression(DIMS, 1);
    let mut rng = StreamKey::new(seed, Purpose::Synth, 0).rng();
    let truth = normal(&mut rng, DIMS + 1);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let x = normal(rng, DIMS);
        let y = truth[DIMS] + x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + rng.sample::<f64, _>(StandardNormal);
        Sample::new(x, Label::Target(y))
    };
    let shards: Vec<NodeDataset> = (0..3)
        .map(|k| NodeDataset::new(k, (0..16).map(|_| draw(&mut rng)).collect()))
        .collect::<std::result::Result<_, _>>()?;
    let eval = EvalSet::new((0..32).map(|_| draw(&mut rng)).collect())?;
    let initial = ParamVector(normal(&mut rng, model.d()));
    let j = rng.random_range(0..3);
    let horizon = radii.iter().copied().max().unwrap_or(0).max(1);
    let topo = Topology::ring(3)?;
    let w = MixingMatrix::uniform(&topo);

    let gap_at = |eta: f64| -> Result<Vec<f64>> {
        let cfg = TrainConfig {
            rounds: horizon,
            lr: LrSchedule::Constant(eta),
            batch_size: 8,
            q: None,
            seed,
            snapshots: SnapshotPolicy::All,
            init: InitPolicy::Shared,
        };
        let inputs = TrainingInputs {
            model: model.clone(),
            topology: topo.clone(),
            mixing: w.clone().into(),
            shards: shards.clone(),
            eval: eval.clone(),
            initial: Some(vec![initial.clone(); 3]),
        };
        let trace = run_training(&cfg, inputs, 1)?;
        radii
            .iter()
            .map(|&r| {
                let g = dice_gt(&trace, &InfluenceQuery::new(j, 0, r, Estimator::Gt), &eval)?.total;
                let e = dice_e_r_hop(&trace, &InfluenceQuery::new(j, 0, r, Estimator::Estimate), &eval)?.total;
                Ok((g - e).abs())
            })
            .collect()
    };
    let full = gap_at(lr)?;
    let half = gap_at(lr / 2.0)?;
    Ok(full.into_iter().zip(half).collect())
}

/// Ground-truth minus estimate at iteration 0 on a 3-node ring of linear
/// least-squares models, at `lr` and `lr / 2`, for each seed and radius.
pub fn taylor_residual_study(seeds: &[u64], radii: &[usize], lr: f64) -> Result<TaylorStudy> {
    if seeds.is_empty() || radii.is_empty() {
        return Err(Error::Config("taylor study needs seeds and radii".into()));
    }
    let gaps = seeds
        .par_iter()
        .map(|&s| taylor_gaps(s, radii, lr))
        .collect::<Result<Vec<_>>>()?;
    let median_ratio = (0..radii.len())
        .map(|i| median(gaps.iter().map(|g| g[i].0 / g[i].1).collect()))
        .collect();
    Ok(TaylorStudy {
        radii: radii.to_vec(),
        lr,
        gaps,
        median_ratio,
    })
}
