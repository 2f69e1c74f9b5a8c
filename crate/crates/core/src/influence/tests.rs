use super::*;
use crate::data::{synth_classification, EvalSet, NodeDataset, SynthConfig};
use crate::engine::{run_training, InitPolicy, LrSchedule, SnapshotPolicy, TrainConfig, TrainingInputs};
use crate::model::{Activation, Label, LossKind};
use crate::topology::{MixingMatrix, Topology};

fn cfg(rounds: usize, lr: f64, batch: usize) -> TrainConfig {
    TrainConfig {
        rounds,
        lr: LrSchedule::Constant(lr),
        batch_size: batch,
        q: None,
        seed: 23,
        snapshots: SnapshotPolicy::All,
        init: InitPolicy::PerNode,
    }
}

fn target(v: f64) -> Sample {
    Sample::new(vec![], Label::Target(v))
}

/// Scalar quadratic nodes, one datum each, so every batch is fixed.
fn scalar_trace(topo: Topology, w: MixingMatrix, data: &[f64], init: &[f64], lr: f64, rounds: usize) -> TrainingTrace {
    let inputs = TrainingInputs {
        model: ModelSpec::scalar_quadratic(),
        topology: topo,
        mixing: w.into(),
        shards: data.iter().enumerate().map(|(k, &v)| NodeDataset::new(k, vec![target(v)]).unwrap()).collect(),
        eval: EvalSet::new(vec![target(0.25)]).unwrap(),
        initial: Some(init.iter().map(|&v| ParamVector(vec![v])).collect()),
    };
    run_training(&cfg(rounds, lr, 1), inputs, 1).unwrap()
}

fn mlp_trace(n: usize, topo: Topology, rounds: usize, lr: f64, batch: usize) -> TrainingTrace {
    let synth = SynthConfig {
        nodes: n,
        per_node: 64,
        dims: 4,
        classes: 3,
        eval_size: 40,
        separation: 1.5,
        spread: 1.0,
    };
    let (shards, eval) = synth_classification(&synth, 8).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let inputs = TrainingInputs {
        model: ModelSpec::mlp(vec![4, 6, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap(),
        topology: topo,
        mixing: w.into(),
        shards,
        eval,
        initial: None,
    };
    run_training(&cfg(rounds, lr, batch), inputs, 2).unwrap()
}

fn est(node: usize, t: usize, r: usize) -> InfluenceQuery {
    InfluenceQuery::new(node, t, r, Estimator::Estimate)
}

fn gt(node: usize, t: usize, r: usize) -> InfluenceQuery {
    InfluenceQuery::new(node, t, r, Estimator::Gt)
}

#[test]
fn zero_update_has_zero_influence_everywhere() {
    let topo = Topology::ring(4).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let trace = scalar_trace(topo, w, &[1.0, 2.0, 3.0, 4.0], &[0.0, 2.0, 1.0, 5.0], 0.1, 5);
    let eval = trace.eval().clone();
    for r in 0..=3 {
        let g = dice_gt(&trace, &gt(1, 0, r), &eval).unwrap();
        let e = dice_e_r_hop(&trace, &est(1, 0, r), &eval).unwrap();
        for rep in [&g, &e] {
            assert_eq!(rep.total, 0.0);
            assert!(rep.per_hop.iter().all(|&v| v == 0.0));
            assert!(rep.per_node.values().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn radius_zero_ground_truth_is_the_local_loss_drop() {
    let topo = Topology::ring(3).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let trace = scalar_trace(topo, w, &[1.0, -1.0, 2.0], &[0.5, 0.0, 3.0], 0.2, 3);
    let th = trace.params(1).unwrap()[2][0];
    let half = th - 0.2 * (th - 2.0);
    let loss = |x: f64| 0.5 * (x - 0.25) * (x - 0.25);
    let rep = dice_gt(&trace, &gt(2, 1, 0), trace.eval()).unwrap();
    assert!((rep.total - (loss(half) - loss(th)) / 3.0).abs() < 1e-15);
    assert_eq!(rep.per_hop.len(), 1);
}

// Scalar replay written out by hand: θ' = Σ_j W_kj (θ_j − η(θ_j − z_j)).
#[test]
fn ring_of_three_matches_scalar_recursion() {
    let topo = Topology::ring(3).unwrap();
    let w = MixingMatrix::from_rows(
        vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.25, 0.25, 0.5]],
        1e-12,
    )
    .unwrap();
    let data = [1.0, -2.0, 0.5];
    let init = [0.3, 1.1, -0.7];
    let lr = 0.15;
    let trace = scalar_trace(topo, w.clone(), &data, &init, lr, 4);
    let (j, t) = (1, 1);

    let step = |theta: &[f64; 3], skip: Option<usize>| -> [f64; 3] {
        let half: Vec<f64> = (0..3)
            .map(|k| if skip == Some(k) { theta[k] } else { theta[k] - lr * (theta[k] - data[k]) })
            .collect();
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|i| w.get(k, i) * half[i]).sum();
        }
        out
    };
    let mut fact = [init; 5];
    for s in 0..4 {
        fact[s + 1] = step(&fact[s], None);
    }
    let cf1 = step(&fact[t], Some(j));
    let cf2 = step(&cf1, None);
    let loss = |x: f64| 0.5 * (x - 0.25) * (x - 0.25);
    let q = 1.0 / 3.0;
    let half_j = fact[t][j] - lr * (fact[t][j] - data[j]);
    let direct = q * (loss(half_j) - loss(fact[t][j]));
    let hop1: f64 = (0..3).map(|k| q * (loss(fact[t + 1][k]) - loss(cf1[k]))).sum();
    let hop2: f64 = (0..3).map(|k| q * (loss(fact[t + 2][k]) - loss(cf2[k]))).sum();

    let rep = dice_gt(&trace, &gt(j, t, 2), trace.eval()).unwrap();
    assert!((rep.per_hop[0] - direct).abs() < 1e-14);
    assert!((rep.per_hop[1] - hop1).abs() < 1e-14);
    assert!((rep.per_hop[2] - hop2).abs() < 1e-14);
    assert!((rep.total - (direct + hop1 + hop2)).abs() < 1e-14);
}

// For ½(θ−z)² the Hessian is 1, so each walk contributes
// q · ΠW · (θ_end − z') · (1 − η)^{ρ−1} · Δ.
#[test]
fn scalar_walk_sum_matches_hand_derivation() {
    let topo = Topology::from_edges(3, [(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
    let w = MixingMatrix::from_rows(vec![vec![0.6, 0.4, 0.0], vec![0.3, 0.4, 0.3], vec![0.0, 0.5, 0.5]], 1e-12).unwrap();
    let trace = scalar_trace(topo.clone(), w.clone(), &[1.0, -2.0, 0.5], &[0.3, 1.1, -0.7], 0.1, 4);
    let (j, t) = (0, 1);
    let p: Vec<Vec<f64>> = (0..=4).map(|s| trace.params(s).unwrap().iter().map(|x| x[0]).collect()).collect();
    let delta = -0.1 * (p[t][j] - 1.0);
    let q = 1.0 / 3.0;
    let gp = |s: usize, k: usize| p[s][k] - 0.25;
    let mut hops = vec![q * gp(t, j) * delta, 0.0, 0.0];
    for &k in topo.out_neighbors(j) {
        hops[1] += q * w.get(k, j) * gp(t + 1, k) * delta;
        for &l in topo.out_neighbors(k) {
            hops[2] += q * w.get(k, j) * w.get(l, k) * gp(t + 2, l) * (1.0 - 0.1) * delta;
        }
    }
    let two = dice_e_two_hop(&trace, &est(j, t, 2), trace.eval()).unwrap();
    let walk = dice_e_r_hop(&trace, &est(j, t, 2), trace.eval()).unwrap();
    for rho in 0..3 {
        assert!((two.per_hop[rho] - hops[rho]).abs() < 1e-15);
        assert!((walk.per_hop[rho] - hops[rho]).abs() < 1e-15);
    }
}

#[test]
fn single_node_radius_zero_is_tracin() {
    let topo = Topology::from_edges(1, [(0, 0)]).unwrap();
    let trace = scalar_trace(topo, MixingMatrix::identity(1), &[2.0], &[5.0], 0.1, 3);
    let th = trace.params(1).unwrap()[0][0];
    let rep = dice_e_r_hop(&trace, &est(0, 1, 0), trace.eval()).unwrap();
    assert!((rep.total - -(0.1 * (th - 0.25) * (th - 2.0))).abs() < 1e-15);
    let one = dice_e_one_hop(&trace, &est(0, 1, 1), trace.eval()).unwrap();
    let th1 = trace.params(2).unwrap()[0][0];
    let self_term = -(0.1 * (th1 - 0.25) * (th - 2.0));
    assert!((one.total - (rep.total + self_term)).abs() < 1e-15);
}

#[test]
fn walk_sum_reproduces_one_and_two_hop_forms() {
    let trace = mlp_trace(5, Topology::ring(5).unwrap(), 6, 0.2, 16);
    let eval = trace.eval().clone();
    for (j, t) in [(0, 0), (3, 2), (4, 4)] {
        let one = dice_e_one_hop(&trace, &est(j, t, 1), &eval).unwrap();
        let r1 = dice_e_r_hop(&trace, &est(j, t, 1), &eval).unwrap();
        assert_eq!(one, r1);
        let two = dice_e_two_hop(&trace, &est(j, t, 2), &eval).unwrap();
        let r2 = dice_e_r_hop(&trace, &est(j, t, 2), &eval).unwrap();
        for (a, b) in two.per_hop.iter().zip(&r2.per_hop) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        for (k, v) in &two.per_node {
            assert!((v - r2.per_node[k]).abs() <= 1e-12);
        }
        assert!((two.total - r2.total).abs() <= 1e-12);
    }
}

#[test]
fn matrix_free_walks_match_dense_oracle() {
    let trace = mlp_trace(4, Topology::ring(4).unwrap(), 6, 0.3, 8);
    let eval = trace.eval().clone();
    for r in 0..=3 {
        let dense = dense_path_oracle(&trace, 1, 1, r, &eval).unwrap();
        let walk = dice_e_r_hop(&trace, &est(1, 1, r), &eval).unwrap();
        for (a, b) in dense.iter().zip(&walk.per_hop) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "r={r}: {a} vs {b}");
        }
    }
}

#[test]
fn one_hop_splits_into_direct_and_proximal_terms() {
    let trace = mlp_trace(6, Topology::exponential(6).unwrap(), 4, 0.2, 16);
    let eval = trace.eval().clone();
    let (j, t) = (2, 1);
    let one = dice_e_one_hop(&trace, &est(j, t, 1), &eval).unwrap();
    let mut sum = one.per_hop[0];
    for k in 0..6 {
        let p = proximal_influence(&trace, j, k, t, &eval).unwrap();
        assert_eq!(p.neighbor, trace.topology().has_edge(k, j));
        if !p.neighbor {
            assert_eq!(p.value, 0.0);
        }
        sum += p.value;
    }
    assert!((sum - one.total).abs() <= 1e-12);
}

#[test]
fn aligned_update_is_beneficial() {
    // Both nodes pull towards the eval target, so every term is negative.
    let topo = Topology::ring(2).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let trace = scalar_trace(topo, w, &[0.25, 0.25], &[3.0, 2.0], 0.1, 3);
    let p = proximal_influence(&trace, 0, 1, 0, trace.eval()).unwrap();
    assert!(p.value < 0.0);
    let g = dice_gt(&trace, &gt(0, 0, 1), trace.eval()).unwrap();
    let e = dice_e_one_hop(&trace, &est(0, 0, 1), trace.eval()).unwrap();
    assert!(g.total < 0.0 && e.total < 0.0);
}

#[test]
fn per_sample_reports_add_up_to_the_batch() {
    let trace = mlp_trace(4, Topology::ring(4).unwrap(), 5, 0.2, 32);
    let eval = trace.eval().clone();
    for r in [1, 2] {
        let batch = dice_e_r_hop(&trace, &est(2, 1, r), &eval).unwrap();
        let samples = dice_e_per_sample(&trace, &est(2, 1, r), &eval).unwrap();
        assert_eq!(samples.len(), 32);
        let sum = dice_e_batch_additivity(&samples).unwrap();
        assert!((sum.total - batch.total).abs() <= 1e-12);
        for (a, b) in sum.per_hop.iter().zip(&batch.per_hop) {
            assert!((a - b).abs() <= 1e-12);
        }
        let mut q = est(2, 1, r);
        q.per_sample = true;
        let with = dice_e_r_hop(&trace, &q, &eval).unwrap();
        assert_eq!(with.total, batch.total);
        assert_eq!(with.per_sample, sum.per_sample);
    }
    let one = dice_e_one_hop(&trace, &est(2, 1, 1), &eval).unwrap();
    let samples = dice_e_per_sample(&trace, &est(2, 1, 1), &eval).unwrap();
    let single = InfluenceQuery {
        unit: RemovalUnit::SingleSample(trace.batch_indices(1, 2)[3]),
        ..est(2, 1, 1)
    };
    let alone = dice_e_one_hop(&trace, &single, &eval).unwrap();
    assert_eq!(alone.total, samples[3].total);
    assert!((dice_e_batch_additivity(&samples).unwrap().total - one.total).abs() <= 1e-12);
}

#[test]
fn identical_samples_split_the_batch_evenly() {
    let topo = Topology::ring(2).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let inputs = TrainingInputs {
        model: ModelSpec::scalar_quadratic(),
        topology: topo,
        mixing: w.into(),
        shards: vec![
            NodeDataset::new(0, vec![target(1.5), target(1.5)]).unwrap(),
            NodeDataset::new(1, vec![target(-1.0), target(2.0)]).unwrap(),
        ],
        eval: EvalSet::new(vec![target(0.0)]).unwrap(),
        initial: Some(vec![ParamVector(vec![0.7]), ParamVector(vec![-0.2])]),
    };
    let trace = run_training(&cfg(3, 0.1, 2), inputs, 1).unwrap();
    let batch = dice_e_one_hop(&trace, &est(0, 1, 1), trace.eval()).unwrap();
    let parts = dice_e_per_sample(&trace, &est(0, 1, 1), trace.eval()).unwrap();
    assert_eq!(parts[0].total, parts[1].total);
    assert_eq!(parts[0].total, batch.total / 2.0);
    let single = dice_e_batch_additivity(&parts[..1]).unwrap();
    assert_eq!(single.total, parts[0].total);
}

#[test]
fn mixed_provenance_is_rejected() {
    let trace = mlp_trace(3, Topology::ring(3).unwrap(), 4, 0.2, 8);
    let eval = trace.eval().clone();
    let a = dice_e_per_sample(&trace, &est(0, 1, 1), &eval).unwrap();
    let b = dice_e_per_sample(&trace, &est(1, 1, 1), &eval).unwrap();
    assert!(matches!(dice_e_batch_additivity(&[a[0].clone(), b[1].clone()]), Err(Error::Provenance(_))));
    assert!(matches!(dice_e_batch_additivity(&[a[0].clone(), a[0].clone()]), Err(Error::Provenance(_))));
    assert!(matches!(dice_e_batch_additivity(&[]), Err(Error::Provenance(_))));
    let whole = dice_e_one_hop(&trace, &est(0, 1, 1), &eval).unwrap();
    assert!(matches!(dice_e_batch_additivity(&[whole]), Err(Error::Provenance(_))));
}

#[test]
fn no_communication_leaves_only_self_walks() {
    let topo = Topology::ring(4).unwrap();
    let trace = mlp_trace(4, topo, 5, 0.2, 8);
    let synth_trace = {
        let inputs = TrainingInputs {
            model: trace.model().clone(),
            topology: trace.topology().clone(),
            mixing: MixingMatrix::identity(4).into(),
            shards: trace.shards().to_vec(),
            eval: trace.eval().clone(),
            initial: None,
        };
        run_training(&cfg(5, 0.2, 8), inputs, 1).unwrap()
    };
    let rep = dice_e_r_hop(&synth_trace, &est(1, 0, 3), synth_trace.eval()).unwrap();
    assert_eq!(rep.per_node.keys().copied().collect::<Vec<_>>(), vec![1]);
    let two = dice_e_two_hop(&synth_trace, &est(1, 0, 2), synth_trace.eval()).unwrap();
    assert_eq!(two.per_node.len(), 1);
}

#[test]
fn shortest_path_attribution_uses_exact_distances() {
    let trace = mlp_trace(6, Topology::ring(6).unwrap(), 4, 0.2, 8);
    let mut q = gt(0, 0, 2);
    q.hops = HopAttribution::ShortestPath;
    let rep = dice_gt(&trace, &q, trace.eval()).unwrap();
    assert_eq!(rep.per_node.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 4, 5]);
    let reach = dice_gt(&trace, &gt(0, 0, 2), trace.eval()).unwrap();
    assert_eq!(reach.per_hop[0], rep.per_hop[0]);
    assert!((rep.total - (rep.per_hop.iter().sum::<f64>())).abs() < 1e-15);
}

#[test]
fn horizon_and_budget_errors() {
    let trace = mlp_trace(3, Topology::ring(3).unwrap(), 3, 0.2, 8);
    let eval = trace.eval().clone();
    assert!(matches!(dice_gt(&trace, &gt(0, 2, 2), &eval), Err(Error::Range { .. })));
    assert!(matches!(dice_e_r_hop(&trace, &est(0, 3, 0), &eval), Err(Error::Range { .. })));
    assert!(dice_e_r_hop(&trace, &est(0, 1, 2), &eval).is_ok());
    assert!(dice_gt(&trace, &gt(0, 1, 2), &eval).is_ok());

    let big = {
        let topo = Topology::fully_connected(12).unwrap();
        let w = MixingMatrix::uniform(&topo);
        let data: Vec<f64> = (0..12).map(|k| k as f64).collect();
        scalar_trace(topo, w, &data, &[0.0; 12], 0.1, 8)
    };
    let err = dice_e_r_hop(&big, &est(0, 0, 6), big.eval()).unwrap_err();
    assert!(err.is_budget(), "{err}");
}

#[test]
fn reciprocity_of_symmetric_pair_is_one() {
    let topo = Topology::ring(2).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let trace = scalar_trace(topo, w, &[1.0, 1.0], &[2.0, 2.0], 0.1, 3);
    assert_eq!(reciprocity_proximal(&trace, 0, 1, 1, trace.eval()).unwrap(), 1.0);
    assert_eq!(reciprocity_neighborhood(&trace, 0, 1, trace.eval()).unwrap(), 1.0);
}

#[test]
fn uniform_ring_neighborhood_is_balanced() {
    let topo = Topology::ring(5).unwrap();
    let w = MixingMatrix::uniform(&topo);
    let trace = scalar_trace(topo, w, &[1.0; 5], &[2.0; 5], 0.1, 3);
    for j in 0..5 {
        assert!((reciprocity_neighborhood(&trace, j, 0, trace.eval()).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn one_way_edges_make_ratios_undefined() {
    // 0 sends to 1, 1 never sends to 0.
    let topo = Topology::from_edges(2, [(0, 0), (1, 1), (1, 0)]).unwrap();
    let w = MixingMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.5]], 1e-12).unwrap();
    let trace = scalar_trace(topo, w, &[1.0, -1.0], &[2.0, 0.0], 0.1, 3);
    match reciprocity_proximal(&trace, 0, 1, 0, trace.eval()) {
        Err(Error::UndefinedRatio { numerator, denominator }) => {
            assert_eq!(denominator, 0.0);
            assert!(numerator != 0.0);
        }
        other => panic!("{other:?}"),
    }
    let iso = scalar_trace(
        Topology::ring(3).unwrap(),
        MixingMatrix::identity(3),
        &[1.0, 2.0, 3.0],
        &[0.0; 3],
        0.1,
        2,
    );
    assert!(matches!(
        reciprocity_neighborhood(&iso, 1, 0, iso.eval()),
        Err(Error::UndefinedRatio { .. })
    ));
}

#[test]
fn dominant_node_sends_more_than_it_receives() {
    let (topo, w) = crate::topology::dominant_node_mixing(&Topology::ring(8).unwrap(), 0, 0.5).unwrap();
    let data: Vec<f64> = (0..8).map(|k| 1.0 + 0.1 * k as f64).collect();
    let trace = scalar_trace(topo, w, &data, &[3.0; 8], 0.1, 3);
    let r0 = reciprocity_neighborhood(&trace, 0, 0, trace.eval()).unwrap();
    assert!(r0 > 1.0, "{r0}");
    let r = reciprocity_proximal(&trace, 0, 1, 0, trace.eval()).unwrap();
    assert!(r > 1.0, "{r}");
}

#[test]
fn loo_of_a_redundant_point_is_zero() {
    let model = ModelSpec::scalar_quadratic();
    let eval = EvalSet::new(vec![target(0.0)]).unwrap();
    let samples = vec![target(3.0); 4];
    let mut c = cfg(30, 0.2, 2);
    c.init = InitPolicy::Shared;
    let v = loo_retrain(&model, &samples, 1, &eval, &c, Some(ParamVector(vec![0.0]))).unwrap();
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn loo_sign_separates_clean_and_mislabeled_points() {
    // Regression through the origin: y = 2x is clean, (1, -6) is mislabeled.
    let model = ModelSpec::linear_regression(1, 1);
    let s = |x: f64, y: f64| Sample::new(vec![x], Label::Target(y));
    let samples = vec![s(1.0, 2.0), s(-1.0, -2.0), s(2.0, 4.0), s(1.0, -6.0)];
    let eval = EvalSet::new(vec![s(1.5, 3.0), s(-0.5, -1.0)]).unwrap();
    let mut c = cfg(300, 0.05, 3);
    c.init = InitPolicy::Shared;
    let init = Some(ParamVector(vec![0.0, 0.0]));
    let clean = loo_retrain(&model, &samples, 2, &eval, &c, init.clone()).unwrap();
    let bad = loo_retrain(&model, &samples, 3, &eval, &c, init).unwrap();
    assert!(clean < 0.0, "clean point should help: {clean}");
    assert!(bad > 0.0, "mislabeled point should hurt: {bad}");
}

#[test]
fn loo_harness_matches_single_node_traces() {
    let model = ModelSpec::linear_regression(1, 1);
    let s = |x: f64, y: f64| Sample::new(vec![x], Label::Target(y));
    let samples = vec![s(1.0, 1.0), s(2.0, 1.5), s(-1.0, 0.0), s(0.5, 2.0)];
    let eval = EvalSet::new(vec![s(1.0, 1.0)]).unwrap();
    let c = cfg(10, 0.1, 2);
    let run = |data: Vec<Sample>| {
        let inputs = TrainingInputs {
            model: model.clone(),
            topology: Topology::from_edges(1, [(0, 0)]).unwrap(),
            mixing: MixingMatrix::identity(1).into(),
            shards: vec![NodeDataset::new(0, data).unwrap()],
            eval: eval.clone(),
            initial: None,
        };
        run_training(&c, inputs, 1).unwrap()
    };
    let full = run(samples.clone());
    let mut rest = samples.clone();
    rest.remove(2);
    let without = run(rest);
    let direct = loo_influence(&full, &without, &eval).unwrap();
    assert_eq!(loo_retrain(&model, &samples, 2, &eval, &c, None).unwrap(), direct);

    let mut other = c.clone();
    other.seed += 1;
    let inputs = TrainingInputs {
        model: model.clone(),
        topology: Topology::from_edges(1, [(0, 0)]).unwrap(),
        mixing: MixingMatrix::identity(1).into(),
        shards: vec![NodeDataset::new(0, samples).unwrap()],
        eval: eval.clone(),
        initial: None,
    };
    let reseeded = run_training(&other, inputs, 1).unwrap();
    assert!(matches!(loo_influence(&full, &reseeded, &eval), Err(Error::Comparability(_))));
}

#[test]
fn reports_export_and_refuse_overwrite() {
    let trace = mlp_trace(3, Topology::ring(3).unwrap(), 3, 0.2, 8);
    let mut q = est(0, 0, 2);
    q.per_sample = true;
    let rep = dice_e_r_hop(&trace, &q, trace.eval()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    rep.write_json(&json, false).unwrap();
    let back: InfluenceReport = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(back, rep);
    assert!(rep.write_json(&json, false).is_err());
    let csv_path = dir.path().join("r.csv");
    rep.write_csv(&csv_path, false).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 + rep.per_node.len() + 8 + 1);
    assert!(text.lines().last().unwrap().starts_with("total,,"));
}
