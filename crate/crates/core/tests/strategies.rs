mod common;

use common::*;
use gnnood_core::evaluation::accuracy;
use gnnood_core::graph::Graph;
use gnnood_core::models::{init_params, GraphInputs, ModelKind, ModelSpec};
use gnnood_core::strategies::{
    erm_loss, graph_mixup, groupdro_step, irm_penalty, mixup_partners, predict, train, vrex_penalty, EnvBatch,
    Strategy, TrainPlan,
};
use gnnood_core::tensor::{rng, DenseMatrix, Tape};
use gnnood_core::Error;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn direct_ce(z: &M, rows: &[usize], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for &r in rows {
        let p = softmax_row(&z[r]);
        total -= p[labels[r]].ln();
    }
    total / rows.len() as f64
}

fn scaled(z: &M, w: f64) -> M {
    z.iter().map(|r| r.iter().map(|v| v * w).collect()).collect()
}

#[test]
fn erm_loss_matches_direct_evaluation() {
    let z = random_matrix(10, 3, 40);
    let labels: Vec<usize> = (0..10).map(|i| (i * 7) % 3).collect();
    let train = [0, 2, 3, 7, 9];
    let mut tape = Tape::new();
    let logits = tape.constant(dense(&z));
    let l = erm_loss(&mut tape, logits, &labels, &train).unwrap();
    assert!((tape.scalar(l) - direct_ce(&z, &train, &labels)).abs() < 1e-14);

    let mut tape = Tape::new();
    let sat = tape.constant(DenseMatrix::from_rows(&[&[1000.0, 0.0]]));
    let l = erm_loss(&mut tape, sat, &[0], &[0]).unwrap();
    assert!(tape.scalar(l) < 1e-9);
    let uni = tape.constant(DenseMatrix::zeros(1, 2));
    let l = erm_loss(&mut tape, uni, &[0], &[0]).unwrap();
    assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn irm_penalty_matches_scalar_finite_differences() {
    let z = random_matrix(12, 4, 41);
    let labels: Vec<usize> = (0..12).map(|i| (i * 5 + 1) % 4).collect();
    let env_id: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let train: Vec<usize> = (0..12).filter(|i| i % 4 != 3).collect();
    let envs = EnvBatch::from_nodes(&train, &env_id);
    assert_eq!(envs.len(), 3);

    let mut want = 0.0;
    let h = 1e-5;
    for (_, rows) in &envs.envs {
        let g = (direct_ce(&scaled(&z, 1.0 + h), rows, &labels) - direct_ce(&scaled(&z, 1.0 - h), rows, &labels))
            / (2.0 * h);
        want += g * g;
    }
    let mut tape = Tape::new();
    let logits = tape.constant(dense(&z));
    let pen = irm_penalty(&mut tape, logits, &labels, &envs).unwrap();
    let got = tape.scalar(pen);
    assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");

    // One environment is the same as the whole mask.
    let single = EnvBatch::from_nodes(&train, &[0; 12]);
    let mut tape = Tape::new();
    let logits = tape.constant(dense(&z));
    let one = irm_penalty(&mut tape, logits, &labels, &single).unwrap();
    let whole = tape.irm_scale_grad(logits, &train, &train.iter().map(|&r| labels[r]).collect::<Vec<_>>()).unwrap();
    assert_eq!(tape.scalar(one), tape.scalar(whole).powi(2));

    // Uniform logits are stationary in the scale.
    let mut tape = Tape::new();
    let flat = tape.constant(DenseMatrix::zeros(12, 4));
    let pen = irm_penalty(&mut tape, flat, &labels, &envs).unwrap();
    assert!(tape.scalar(pen).abs() < 1e-15);
}

#[test]
fn vrex_penalty_properties() {
    let v = vrex_penalty(&[0.3, 0.5, 1.0]).unwrap();
    let mean = (0.3 + 0.5 + 1.0) / 3.0;
    let direct = [0.3f64, 0.5, 1.0].iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 3.0;
    assert!((v - direct).abs() < 1e-15);
    assert!((v - 0.086_666_666_666_666_7).abs() < 1e-12);

    let mut r = rng::stream(42, "vrex", 0);
    for _ in 0..50 {
        let mut risks: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..3.0)).collect();
        let a = vrex_penalty(&risks).unwrap();
        assert!(a >= 0.0);
        risks.shuffle(&mut r);
        assert!((a - vrex_penalty(&risks).unwrap()).abs() < 1e-12);
    }
    assert!(vrex_penalty(&[0.4; 4]).unwrap().abs() < 1e-12);
}

#[test]
fn groupdro_oracle() {
    let (q, loss) = groupdro_step(&[0.2, 0.8], &[0.5, 0.5], 1.0).unwrap();
    let (a, b) = (0.5 * 0.2f64.exp(), 0.5 * 0.8f64.exp());
    let want = [a / (a + b), b / (a + b)];
    assert!((q[0] - want[0]).abs() < 1e-15 && (q[1] - want[1]).abs() < 1e-15);
    assert!((loss - (want[0] * 0.2 + want[1] * 0.8)).abs() < 1e-15);
    assert!(q[1] > 0.5);
    assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // Permuting environments permutes the weights and keeps the loss.
    let (qp, lp) = groupdro_step(&[0.8, 0.2], &[0.5, 0.5], 1.0).unwrap();
    assert_eq!((qp[0], qp[1]), (q[1], q[0]));
    assert!((lp - loss).abs() < 1e-15);
}

#[test]
fn mixup_convex_combination() {
    let h = dense(&random_matrix(10, 4, 43));
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let y = DenseMatrix::from_fn(10, 3, |r, c| f64::from(u8::from(labels[r] == c)));
    let train = [1, 2, 4, 5, 8, 9];
    let (mh, my) = graph_mixup(&h, &y, &train, 0.3, 17).unwrap();
    let partner = mixup_partners(&train, 17);
    let mut sorted = partner.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, train);
    for (k, (&i, &j)) in train.iter().zip(&partner).enumerate() {
        for c in 0..4 {
            assert!((mh.get(k, c) - (0.3 * h.get(i, c) + 0.7 * h.get(j, c))).abs() < 1e-15);
        }
        for c in 0..3 {
            assert!((my.get(k, c) - (0.3 * y.get(i, c) + 0.7 * y.get(j, c))).abs() < 1e-15);
        }
    }
}

fn env_fixture(seed: u64) -> Graph {
    let n = 24;
    let a = random_adjacency(n, 0.2, seed);
    let x = random_matrix(n, 5, seed + 1);
    let labels: Vec<usize> = (0..n).map(|v| usize::from(x[v][0] + 0.3 * x[v][1] > 0.0)).collect();
    multi_env_graph(&a, &x, labels, 2)
}

fn spec() -> ModelSpec {
    ModelSpec::new(ModelKind::Gcn, 2, 8)
}

#[test]
fn epochs_contract() {
    let g = env_fixture(50);
    let err = train(&spec(), &TrainPlan::new(Strategy::Erm, 0, 0.01), &g).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let out = train(&spec(), &TrainPlan::new(Strategy::Erm, 1, 0.01), &g).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.best_epoch, 0);
    let init = init_params(&spec(), 5, 2, 0).unwrap();
    assert_ne!(out.params, init);
}

#[test]
fn training_is_deterministic() {
    let g = env_fixture(51);
    for strategy in [Strategy::Erm, Strategy::GraphMixup, Strategy::GroupDro] {
        let mut s = spec();
        s.dropout = 0.3;
        let plan = TrainPlan {
            seed: 9,
            ..TrainPlan::new(strategy, 15, 0.01)
        };
        let a = train(&s, &plan, &g).unwrap();
        let b = train(&s, &plan, &g).unwrap();
        assert_eq!(a.trace, b.trace, "{strategy}");
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn zero_penalty_weight_is_erm() {
    let g = env_fixture(52);
    let mut s = spec();
    s.dropout = 0.2;
    let base = TrainPlan {
        seed: 3,
        ..TrainPlan::new(Strategy::Erm, 20, 0.01)
    };
    let erm = train(&s, &base, &g).unwrap();
    for strategy in [Strategy::Irm, Strategy::Vrex] {
        let plan = TrainPlan {
            strategy,
            lambda: 0.0,
            ..base.clone()
        };
        let other = train(&s, &plan, &g).unwrap();
        for (x, y) in erm.trace.iter().zip(&other.trace) {
            assert!((x.loss - y.loss).abs() < 1e-12, "{strategy} epoch {}", x.epoch);
        }
    }
}

#[test]
fn groupdro_with_one_environment_is_erm() {
    let g = env_fixture(53);
    let one_env = Graph::new(
        g.features().clone(),
        g.adjacency().clone(),
        g.labels().to_vec(),
        2,
        g.env_id().iter().map(|&e| usize::from(e == 2)).collect(),
        2,
        g.splits().clone(),
    )
    .unwrap();
    let base = TrainPlan::new(Strategy::Erm, 10, 0.01);
    let erm = train(&spec(), &base, &one_env).unwrap();
    let dro = train(
        &spec(),
        &TrainPlan {
            strategy: Strategy::GroupDro,
            group_step: 0.5,
            ..base
        },
        &one_env,
    )
    .unwrap();
    assert_eq!(erm.trace, dro.trace);
}

#[test]
fn mixup_needs_a_head() {
    let g = env_fixture(54);
    let s = ModelSpec::new(ModelKind::Appnp, 2, 8);
    let err = train(&s, &TrainPlan::new(Strategy::GraphMixup, 5, 0.01), &g).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Plain logistic regression by gradient descent, written out by hand.
fn logistic_regression_accuracy(x: &M, y: &[usize]) -> f64 {
    let d = x[0].len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..5000 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            for k in 0..d {
                gw[k] += err * xi[k];
            }
            gb += err;
        }
        for k in 0..d {
            w[k] -= 0.5 * gw[k] / x.len() as f64;
        }
        b -= 0.5 * gb / x.len() as f64;
    }
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            usize::from(z > 0.0) == yi
        })
        .count();
    hits as f64 / x.len() as f64
}

#[test]
fn separable_graph_is_fit_exactly() {
    let n = 20;
    let labels: Vec<usize> = (0..n).map(|v| (v / 2) % 2).collect();
    let mut r = rng::stream(60, "separable", 0);
    let x: M = (0..n)
        .map(|v| {
            let sign = if labels[v] == 1 { 1.0 } else { -1.0 };
            vec![sign * r.gen_range(0.5..1.5), r.gen_range(-1.0..1.0)]
        })
        .collect();
    assert_eq!(logistic_regression_accuracy(&x, &labels), 1.0);

    // Edges only join same-class nodes.
    let mut a = zeros(n, n);
    for v in 0..n - 4 {
        a[v][v + 4] = 1.0;
        a[v + 4][v] = 1.0;
    }
    let g = multi_env_graph(&a, &x, labels, 2);
    let s = ModelSpec::new(ModelKind::Gcn, 2, 16);
    let out = train(&s, &TrainPlan::new(Strategy::Erm, 200, 0.01), &g).unwrap();
    let last = out.trace.last().unwrap();
    assert_eq!(last.train_acc, 1.0);
    let logits = predict(&s, &out.params, &GraphInputs::from_graph(&g)).unwrap();
    assert_eq!(accuracy(&logits, g.labels(), &g.splits().train).unwrap(), 1.0);
}

#[test]
fn best_epoch_prefers_earliest_tie() {
    let g = env_fixture(55);
    let out = train(&spec(), &TrainPlan::new(Strategy::Erm, 30, 0.01), &g).unwrap();
    let best = out.trace.iter().map(|e| e.iid_val_acc).fold(f64::NEG_INFINITY, f64::max);
    let first = out.trace.iter().position(|e| e.iid_val_acc == best).unwrap();
    assert_eq!(out.best_epoch, first);
}

#[test]
fn loss_is_monotone_after_lr_backoff() {
    let g = env_fixture(56);
    let mut lr = 0.1;
    let mut monotone = false;
    for _ in 0..16 {
        let out = train(&spec(), &TrainPlan::new(Strategy::Erm, 40, lr), &g).unwrap();
        if out.trace.windows(2).all(|w| w[1].loss <= w[0].loss) {
            monotone = true;
            break;
        }
        lr /= 2.0;
    }
    assert!(monotone, "no learning rate down to {lr} gave a non-increasing loss");
}
