use std::collections::BTreeSet;

use dice_core::analysis::{pearson, spearman};
use dice_core::data::{flip_labels, synth_classification, NodeDataset, SynthConfig};
use dice_core::engine::{run_training, InitPolicy, LrSchedule, SnapshotPolicy, TrainConfig, TrainingInputs};
use dice_core::influence::{dice_e_batch_additivity, dice_e_per_sample, dice_e_r_hop, dice_gt, Estimator, InfluenceQuery};
use dice_core::model::{refs, Activation, Label, LossKind, ModelSpec, ParamVector, Sample};
use dice_core::topology::{MixingMatrix, Topology, DEFAULT_PATH_CAP};
use proptest::prelude::*;

fn graph() -> impl Strategy<Value = Topology> {
    (1usize..=16).prop_flat_map(|n| {
        proptest::collection::vec(proptest::bool::weighted(0.25), n * n).prop_map(move |bits| {
            let edges = (0..n * n).filter(|&i| bits[i] || i / n == i % n).map(|i| (i / n, i % n));
            Topology::from_edges(n, edges).unwrap()
        })
    })
}

fn small_graph() -> impl Strategy<Value = Topology> {
    graph().prop_filter("n <= 8", |t| t.n() <= 8)
}

/// `a[j][k]` is true when `j` sends to `k`; self-loops dropped.
fn adjacency(t: &Topology) -> Vec<Vec<u64>> {
    let n = t.n();
    let mut a = vec![vec![0u64; n]; n];
    for &(k, j) in t.edges() {
        if k != j {
            a[j][k] = 1;
        }
    }
    a
}

fn matmul(x: &[Vec<u64>], y: &[Vec<u64>]) -> Vec<Vec<u64>> {
    let n = x.len();
    let mut z = vec![vec![0u64; n]; n];
    for i in 0..n {
        for m in 0..n {
            if x[i][m] == 0 {
                continue;
            }
            for c in 0..n {
                z[i][c] = z[i][c].saturating_add(x[i][m].saturating_mul(y[m][c]));
            }
        }
    }
    z
}

fn identity(n: usize) -> Vec<Vec<u64>> {
    (0..n).map(|i| (0..n).map(|c| u64::from(i == c)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_rows_are_stochastic_and_supported(t in graph()) {
        let w = MixingMatrix::uniform(&t);
        for k in 0..t.n() {
            let sum: f64 = w.row(k).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            for j in 0..t.n() {
                let v = w.get(k, j);
                prop_assert!((0.0..=1.0).contains(&v));
                if v > 0.0 {
                    prop_assert!(t.has_edge(k, j) || k == j);
                }
            }
        }
        prop_assert!(w.check_support(&t).is_ok());
    }

    #[test]
    fn bfs_distances_match_adjacency_powers(t in graph()) {
        let n = t.n();
        let a = adjacency(&t);
        let mut powers = vec![identity(n)];
        for s in 1..=n {
            powers.push(matmul(&powers[s - 1], &a));
        }
        for j in 0..n {
            for r in 1..=n {
                let expected: BTreeSet<usize> = (0..n)
                    .filter(|&k| powers[r][j][k] > 0 && (0..r).all(|s| powers[s][j][k] == 0))
                    .collect();
                prop_assert_eq!(t.r_hop_neighbors(j, r).unwrap(), expected);
            }
        }
    }

    #[test]
    fn hop_rings_partition_the_reachable_set(t in graph()) {
        for j in 0..t.n() {
            let dist = t.distances_from(j).unwrap();
            let reachable: BTreeSet<usize> = (0..t.n()).filter(|&k| k != j && dist[k].is_some()).collect();
            let mut seen = BTreeSet::new();
            for r in 1..t.n().max(2) {
                for k in t.r_hop_neighbors(j, r).unwrap() {
                    prop_assert!(seen.insert(k), "node {} in two rings", k);
                }
            }
            prop_assert_eq!(seen, reachable);
        }
    }

    #[test]
    fn walk_enumeration_matches_matrix_power_counts(t in small_graph(), len in 0usize..=4) {
        let n = t.n();
        // With self-loops kept: walks are counted by powers of the full adjacency.
        let mut a = vec![vec![0u64; n]; n];
        for &(k, j) in t.edges() {
            a[j][k] = 1;
        }
        let mut p = identity(n);
        for _ in 0..len {
            p = matmul(&p, &a);
        }
        for j in 0..n {
            let expected: u64 = p[j].iter().sum();
            let paths = t.enumerate_paths(j, len, DEFAULT_PATH_CAP).unwrap();
            prop_assert_eq!(paths.sequences.len() as u64, expected);
            prop_assert_eq!(t.walk_count(j, len).unwrap(), expected as u128);
            for seq in &paths.sequences {
                let mut prev = j;
                for &k in seq {
                    prop_assert!(t.has_edge(k, prev));
                    prev = k;
                }
            }
            let unique: BTreeSet<&Vec<usize>> = paths.sequences.iter().collect();
            prop_assert_eq!(unique.len(), paths.sequences.len());
        }
    }
}

fn point(seed: u64, spec: &ModelSpec) -> (ParamVector, Vec<Sample>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let theta = ParamVector((0..spec.d()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let batch = (0..6)
        .map(|_| {
            let x = (0..spec.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let label = if spec.loss_kind() == LossKind::SquaredError && spec.output_dim() == 1 {
                Label::Target(rng.random_range(-1.0..1.0))
            } else {
                Label::Class(rng.random_range(0..spec.output_dim()))
            };
            Sample::new(x, label)
        })
        .collect();
    (theta, batch)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let spec = ModelSpec::mlp(vec![3, 5, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let (theta, batch) = point(seed, &spec);
        let b = refs(&batch);
        let (u, _) = point(seed ^ 1, &spec);
        let (v, _) = point(seed ^ 2, &spec);
        let combined = spec.hvp(&theta, &b, &u.scaled(alpha).add(&v.scaled(beta))).unwrap();
        let split = spec.hvp(&theta, &b, &u).unwrap().scaled(alpha).add(&spec.hvp(&theta, &b, &v).unwrap().scaled(beta));
        prop_assert!(combined.sub(&split).max_abs() <= 1e-10);
    }

    #[test]
    fn hessian_is_symmetric(seed in any::<u64>()) {
        let spec = ModelSpec::mlp(vec![3, 4, 2], Activation::Tanh, LossKind::SquaredError).unwrap();
        let (theta, batch) = point(seed, &spec);
        prop_assert!(spec.dense_hessian(&theta, &refs(&batch)).unwrap().max_asymmetry() < 1e-8);
    }

    #[test]
    fn least_squares_loss_is_exactly_quadratic(seed in any::<u64>()) {
        let spec = ModelSpec::linear_regression(3, 1);
        let (theta, batch) = point(seed, &spec);
        let (v, _) = point(seed.wrapping_add(7), &spec);
        let b = refs(&batch);
        let g = spec.gradient(&theta, &b).unwrap();
        let hv = spec.hvp(&theta, &b, &v).unwrap();
        let rest = spec.loss(&theta.add(&v), &b).unwrap() - spec.loss(&theta, &b).unwrap() - g.dot(&v) - 0.5 * v.dot(&hv);
        prop_assert!(rest.abs() <= 1e-10);
    }

    #[test]
    fn batch_displacement_is_mean_of_sample_displacements(seed in any::<u64>(), lr in 0.001f64..1.0) {
        let spec = ModelSpec::logistic_regression(3, 4).unwrap();
        let (theta, batch) = point(seed, &spec);
        let whole = spec.sgd_displacement(&theta, &refs(&batch), lr).unwrap();
        let mut mean = ParamVector::zeros(spec.d());
        for s in &batch {
            mean = mean.add(&spec.sgd_displacement(&theta, &[s], lr).unwrap().scaled(1.0 / batch.len() as f64));
        }
        prop_assert!(whole.sub(&mean).max_abs() <= 1e-12);
    }

    #[test]
    fn flips_never_keep_a_label(seed in any::<u64>(), fraction in 0.05f64..=1.0, classes in 2usize..6) {
        let cfg = SynthConfig { nodes: 1, per_node: 40, dims: 2, classes, eval_size: 1, separation: 2.0, spread: 1.0 };
        let (shards, _) = synth_classification(&cfg, seed).unwrap();
        let flipped = flip_labels(&shards[0], fraction, seed, classes).unwrap();
        let changed = shards[0].samples.iter().zip(&flipped.samples).filter(|(a, b)| a.label != b.label).count();
        prop_assert_eq!(changed, (fraction * 40.0).round() as usize);
        for (a, b) in shards[0].samples.iter().zip(&flipped.samples) {
            prop_assert_eq!(&a.features, &b.features);
            prop_assert!(b.label.class().unwrap() < classes);
        }
    }

    #[test]
    fn generators_are_pure_and_shards_disjoint(seed in any::<u64>()) {
        let cfg = SynthConfig { nodes: 3, per_node: 10, dims: 3, classes: 3, eval_size: 10, separation: 2.0, spread: 1.0 };
        let (a, ea) = synth_classification(&cfg, seed).unwrap();
        let (b, eb) = synth_classification(&cfg, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&ea, &eb);
        let mut seen = BTreeSet::new();
        for s in a.iter().flat_map(|d| d.samples.iter()).chain(ea.samples.iter()) {
            let key: Vec<u64> = s.features.iter().map(|x| x.to_bits()).collect();
            prop_assert!(seen.insert(key));
        }
    }

    #[test]
    fn correlations_are_bounded_and_rank_invariant(xs in proptest::collection::vec(-100.0f64..100.0, 3..20), shift in -5.0f64..5.0) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.1).collect();
        if let (Ok(p), Ok(s)) = (pearson(&xs, &ys), spearman(&xs, &ys)) {
            prop_assert!(p.abs() <= 1.0 && s.abs() <= 1.0);
            let warped: Vec<f64> = xs.iter().map(|x| (x / 50.0).exp() + shift).collect();
            prop_assert!((spearman(&warped, &ys).unwrap() - s).abs() <= 1e-12);
        }
    }
}

fn ring_run(seed: u64, n: usize, threads: usize) -> dice_core::engine::TrainingTrace {
    let topo = Topology::ring(n).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let cfg = SynthConfig { nodes: n, per_node: 24, dims: 3, classes: 3, eval_size: 20, separation: 2.0, spread: 1.0 };
    let (shards, eval) = synth_classification(&cfg, seed).unwrap();
    let train = TrainConfig {
        rounds: 5,
        lr: LrSchedule::Constant(0.2),
        batch_size: 8,
        q: None,
        seed,
        snapshots: SnapshotPolicy::All,
        init: InitPolicy::PerNode,
    };
    let inputs = TrainingInputs {
        model: ModelSpec::mlp(vec![3, 4, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap(),
        topology: topo,
        mixing: w.into(),
        shards,
        eval,
        initial: None,
    };
    run_training(&train, inputs, threads).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_ignores_worker_count(seed in any::<u64>(), n in 2usize..7) {
        let a = ring_run(seed, n, 1);
        let b = ring_run(seed, n, 4);
        for t in 0..=a.rounds() {
            prop_assert_eq!(a.params(t).unwrap(), b.params(t).unwrap());
        }
    }

    #[test]
    fn ring_gossip_conserves_the_node_sum(seed in any::<u64>(), n in 2usize..7) {
        let trace = ring_run(seed, n, 0);
        for t in 0..trace.rounds() {
            let now = trace.params(t).unwrap();
            let next = trace.params(t + 1).unwrap();
            let mut gap = ParamVector::zeros(trace.model().d());
            for k in 0..n {
                gap = gap.add(&now[k]).add(&trace.displacement(t, k, &now[k]).unwrap()).sub(&next[k]);
            }
            prop_assert!(gap.max_abs() <= 1e-10);
        }
    }

    #[test]
    fn reports_total_their_hops(seed in any::<u64>(), j in 0usize..3, t in 0usize..3, r in 0usize..3) {
        let trace = ring_run(seed, 3, 0);
        let eval = trace.eval().clone();
        for rep in [
            dice_gt(&trace, &InfluenceQuery::new(j, t, r, Estimator::Gt), &eval).unwrap(),
            dice_e_r_hop(&trace, &InfluenceQuery::new(j, t, r, Estimator::Estimate), &eval).unwrap(),
        ] {
            prop_assert_eq!(rep.per_hop.len(), r + 1);
            prop_assert!((rep.total - rep.per_hop.iter().sum::<f64>()).abs() <= 1e-9);
            prop_assert!((rep.total - rep.per_node.values().sum::<f64>()).abs() <= 1e-9);
        }
        let parts = dice_e_per_sample(&trace, &InfluenceQuery::new(j, t, r, Estimator::Estimate), &eval).unwrap();
        let whole = dice_e_r_hop(&trace, &InfluenceQuery::new(j, t, r, Estimator::Estimate), &eval).unwrap();
        prop_assert!((dice_e_batch_additivity(&parts).unwrap().total - whole.total).abs() <= 1e-12);
    }

    #[test]
    fn zero_update_gives_zero_influence(seed in any::<u64>(), r in 0usize..3) {
        // Node 0 already sits on its only datum, so its step is exactly zero.
        let topo = Topology::ring(3).unwrap();
        let w = MixingMatrix::uniform(&topo);
        let target = |v: f64| Sample::new(vec![], Label::Target(v));
        let v = (seed % 1000) as f64 / 100.0;
        let inputs = TrainingInputs {
            model: ModelSpec::scalar_quadratic(),
            topology: topo,
            mixing: w.into(),
            shards: (0..3).map(|k| NodeDataset::new(k, vec![target(if k == 0 { v } else { k as f64 })]).unwrap()).collect(),
            eval: dice_core::data::EvalSet::new(vec![target(0.5)]).unwrap(),
            initial: Some(vec![ParamVector(vec![v]), ParamVector(vec![1.0]), ParamVector(vec![-1.0])]),
        };
        let train = TrainConfig {
            rounds: 3,
            lr: LrSchedule::Constant(0.1),
            batch_size: 1,
            q: None,
            seed,
            snapshots: SnapshotPolicy::All,
            init: InitPolicy::PerNode,
        };
        let trace = run_training(&train, inputs, 0).unwrap();
        let gt = dice_gt(&trace, &InfluenceQuery::new(0, 0, r, Estimator::Gt), trace.eval()).unwrap();
        let e = dice_e_r_hop(&trace, &InfluenceQuery::new(0, 0, r, Estimator::Estimate), trace.eval()).unwrap();
        prop_assert!(gt.per_hop.iter().chain(&e.per_hop).all(|&x| x == 0.0));
    }
}
