use gnnood_core::ib::{
    attention_equivalence_check, ib_information, ib_iterate, ib_objective, ib_run, random_fixture, sphere_fixture,
    two_blob_fixture, verify, IBState,
};
use gnnood_core::tensor::{rng, DenseMatrix};
use gnnood_core::Error;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn row_sums_ok(s: &IBState) {
    for r in 0..s.assignments.rows() {
        let t: f64 = s.assignments.row(r).iter().sum();
        assert!((t - 1.0).abs() < 1e-12);
    }
    assert!((s.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_cluster_gives_centroid() {
    let f = two_blob_fixture(1);
    let s = IBState::initial(40, DenseMatrix::from_rows(&[&[3.0, -1.0]]), DenseMatrix::identity(2), 1e-12).unwrap();
    let next = ib_iterate(&s, &f.points).unwrap();
    assert!(next.assignments.as_slice().iter().all(|&p| p == 1.0));
    for j in 0..2 {
        let c: f64 = (0..40).map(|i| f.points.get(i, j)).sum::<f64>() / 40.0;
        assert!((next.means.get(0, j) - c).abs() < 1e-12);
    }
    assert_eq!(ib_information(&next), 0.0);
    assert_eq!(attention_equivalence_check(&s, &f.points).unwrap(), 0.0);
}

#[test]
fn identical_points_collapse_means() {
    let points = DenseMatrix::from_fn(12, 3, |_, j| [0.4, -1.2, 2.0][j]);
    let means = DenseMatrix::from_rows(&[&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &[-2.0, 0.5, 3.0]]);
    let mut s = IBState::initial(12, means, DenseMatrix::identity(3), 1e-12).unwrap();
    for _ in 0..3 {
        s = ib_iterate(&s, &points).unwrap();
    }
    for k in 0..3 {
        for j in 0..3 {
            assert!((s.means.get(k, j) - points.get(0, j)).abs() < 1e-10);
        }
    }
}

#[test]
fn two_blobs_are_separated() {
    let f = two_blob_fixture(2);
    let truth = f.membership.clone().unwrap();
    let mut s = f.state.clone();
    for _ in 0..10 {
        s = ib_iterate(&s, &f.points).unwrap();
        row_sums_ok(&s);
    }
    let hard: Vec<usize> = (0..40).map(|i| s.assignments.argmax_row(i)).collect();
    let flipped: Vec<usize> = truth.iter().map(|c| 1 - c).collect();
    assert!(hard == truth || hard == flipped);
}

#[test]
fn objective_is_monotone() {
    for f in [two_blob_fixture(3), sphere_fixture(3), random_fixture(3)] {
        let run = ib_run(&f.state, &f.points, 200, 1e-10).unwrap();
        for w in run.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} then {}", w[0], w[1]);
        }
        if run.converged {
            let again = ib_iterate(&run.state, &f.points).unwrap();
            let a = ib_objective(&run.state, &f.points).unwrap();
            let b = ib_objective(&again, &f.points).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }
    let f = two_blob_fixture(4);
    let run = ib_run(&f.state, &f.points, 10, 0.0).unwrap();
    assert_eq!(run.objective_trace.len(), 11);
}

#[test]
fn attention_form_matches_clustering_update() {
    for f in [sphere_fixture(5), random_fixture(5), two_blob_fixture(5)] {
        let dev = attention_equivalence_check(&f.state, &f.points).unwrap();
        assert!(dev < 1e-8, "deviation {dev}");
    }
}

#[test]
fn unequal_norms_are_rejected() {
    let f = sphere_fixture(6);
    let mut s = f.state.clone();
    for v in s.means.row_mut(1) {
        *v *= 1.5;
    }
    match attention_equivalence_check(&s, &f.points) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("cluster 1")),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn permuting_points_permutes_assignments() {
    let f = random_fixture(7);
    let n = f.points.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(7, "perm", 0));
    let moved = f.points.gather_rows(&perm);
    let a = ib_iterate(&f.state, &f.points).unwrap();
    let b = ib_iterate(&f.state, &moved).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        for c in 0..a.assignments.cols() {
            assert!((a.assignments.get(src, c) - b.assignments.get(k, c)).abs() < 1e-15);
        }
    }
    assert!(a.means.max_abs_diff(&b.means) < 1e-12);
}

#[test]
fn small_covariance_gives_hard_assignments() {
    let f = two_blob_fixture(8);
    let eps: f64 = 1e-3;
    let sigma = DenseMatrix::identity(2).scale(eps * eps);
    let s = IBState::initial(40, f.state.means.clone(), sigma, 1e-12).unwrap();
    let mut cur = s;
    for _ in 0..5 {
        cur = ib_iterate(&cur, &f.points).unwrap();
    }
    for i in 0..40 {
        let m = cur.assignments.row(i).iter().copied().fold(0.0, f64::max);
        assert!(m > 0.999);
    }
}

#[test]
fn singular_covariance_is_reported() {
    let f = two_blob_fixture(9);
    let mut s = f.state.clone();
    s.sigma = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
    assert!(matches!(ib_iterate(&s, &f.points), Err(Error::Numerical(_))));
}

#[test]
fn random_states_stay_valid() {
    let mut r = rng::stream(10, "ib-states", 0);
    for _ in 0..20 {
        let points = DenseMatrix::from_fn(15, 3, |_, _| r.gen_range(-4.0..4.0));
        let means = DenseMatrix::from_fn(4, 3, |_, _| r.gen_range(-2.0..2.0));
        let mut s = IBState::initial(15, means, DenseMatrix::identity(3).scale(0.7), 1e-12).unwrap();
        for _ in 0..5 {
            s = ib_iterate(&s, &points).unwrap();
            s.validate().unwrap();
        }
    }
}

#[test]
fn verify_reports_convergence() {
    let report = verify(&two_blob_fixture(0)).unwrap();
    assert!(report.converged);
    assert!(report.deviation < 1e-8);
    assert!(report.objective_trace.len() >= 2);
}
