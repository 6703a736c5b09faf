//! Independent dense reference implementations shared by the integration
//! tests. Nothing here calls into the sparse kernels or the tape.

#![allow(dead_code)]

use gnnood_core::graph::{Graph, SplitMasks};
use gnnood_core::models::ModelParams;
use gnnood_core::tensor::{rng, DenseMatrix};
use rand::Rng as _;

pub type M = Vec<Vec<f64>>;

pub fn to_m(d: &DenseMatrix) -> M {
    (0..d.rows()).map(|r| d.row(r).to_vec()).collect()
}

pub fn p(params: &ModelParams, name: &str) -> M {
    to_m(params.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

pub fn zeros(r: usize, c: usize) -> M {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> M {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn scale(a: &M, k: f64) -> M {
    a.iter().map(|r| r.iter().map(|v| v * k).collect()).collect()
}

pub fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(u, v)| u + v).collect()).collect()
}

pub fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn max_diff(a: &M, b: &DenseMatrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

/// Dense `A` (0/1, symmetric, no self-loops) for a seeded Erdős–Rényi graph
/// where every node has at least one neighbour.
pub fn random_adjacency(n: usize, p_edge: f64, seed: u64) -> M {
    let mut r = rng::stream(seed, "oracle-graph", 0);
    let mut a = zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if r.gen::<f64>() < p_edge {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    for i in 0..n {
        if a[i].iter().all(|&v| v == 0.0) {
            let j = (i + 1) % n;
            a[i][j] = 1.0;
            a[j][i] = 1.0;
        }
    }
    a
}

pub fn random_matrix(r: usize, c: usize, seed: u64) -> M {
    let mut g = rng::stream(seed, "oracle-matrix", 0);
    (0..r).map(|_| (0..c).map(|_| g.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn dense(m: &M) -> DenseMatrix {
    let rows: Vec<&[f64]> = m.iter().map(Vec::as_slice).collect();
    DenseMatrix::from_rows(&rows)
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` computed densely.
pub fn normalized(a: &M) -> M {
    let n = a.len();
    let at = add(a, &identity(n));
    let d: Vec<f64> = at.iter().map(|r| r.iter().sum()).collect();
    (0..n).map(|i| (0..n).map(|j| at[i][j] / (d[i] * d[j]).sqrt()).collect()).collect()
}

fn edges_of(a: &M) -> Vec<(usize, usize)> {
    let n = a.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if a[i][j] != 0.0 {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Wraps a dense adjacency and features into a valid two-environment graph.
pub fn graph_from(a: &M, x: &M, classes: usize, seed: u64) -> Graph {
    let n = a.len();
    let adj = Graph::adjacency_from_undirected(n, &edges_of(a)).unwrap();
    let mut r = rng::stream(seed, "oracle-labels", 0);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    let half = n / 2;
    let env_id: Vec<usize> = (0..n).map(|v| usize::from(v >= half)).collect();
    let splits = SplitMasks {
        train: (0..half - 1).collect(),
        iid_val: vec![],
        iid_test: vec![half - 1],
        ood_val: vec![],
        ood_test: (half..n).collect(),
    };
    Graph::new(dense(x), adj, labels, classes, env_id, 2, splits).unwrap()
}

/// Three environments: nodes in the first three quarters alternate between
/// environments 0 and 1 and make up train/iid_val/iid_test; the rest form
/// environment 2, split into ood_val and ood_test.
pub fn multi_env_graph(a: &M, x: &M, labels: Vec<usize>, classes: usize) -> Graph {
    let n = a.len();
    let adj = Graph::adjacency_from_undirected(n, &edges_of(a)).unwrap();
    let m = 3 * n / 4;
    let env_id: Vec<usize> = (0..n).map(|v| if v < m { v % 2 } else { 2 }).collect();
    let mut splits = SplitMasks::default();
    for v in 0..n {
        let mask = match (v < m, v % 5) {
            (true, 4) => &mut splits.iid_val,
            (true, 3) => &mut splits.iid_test,
            (true, _) => &mut splits.train,
            (false, 0) => &mut splits.ood_val,
            (false, _) => &mut splits.ood_test,
        };
        mask.push(v);
    }
    Graph::new(dense(x), adj, labels, classes, env_id, 3, splits).unwrap()
}

pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Dense attention over the `A + I` mask: `softmax_j LeakyReLU(s_i + t_j)`.
pub fn attention(mask: &M, xw: &M, a_src: &M, a_dst: &M, slope: f64) -> M {
    let n = mask.len();
    let s = mm(xw, a_src);
    let t = mm(xw, a_dst);
    let mut out = zeros(n, n);
    for i in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|&j| i == j || mask[i][j] != 0.0).collect();
        let scores: Vec<f64> = nbrs.iter().map(|&j| leaky(s[i][0] + t[j][0], slope)).collect();
        for (&j, w) in nbrs.iter().zip(softmax_row(&scores)) {
            out[i][j] = w;
        }
    }
    out
}

pub fn oracle_gcn(ah: &M, x: &M, params: &ModelParams, layers: usize, minus: bool) -> M {
    let mut z = x.clone();
    for l in 0..layers {
        let w = p(params, &format!("conv{l}.weight"));
        let b = p(params, &format!("conv{l}.bias"));
        z = add_bias(&mm(ah, &mm(&z, &w)), &b);
        if !(minus && l + 1 == layers) {
            z = relu(&z);
        }
    }
    if minus {
        z
    } else {
        add_bias(&mm(&z, &p(params, "head.weight")), &p(params, "head.bias"))
    }
}

pub fn oracle_gat(a: &M, x: &M, params: &ModelParams, layers: usize, heads: usize, slope: f64) -> M {
    let mut z = x.clone();
    for l in 0..layers {
        let last = l + 1 == layers;
        let mut outs = Vec::new();
        for h in 0..heads {
            let pre = format!("gat{l}.h{h}");
            let xw = mm(&z, &p(params, &format!("{pre}.weight")));
            let att = attention(
                a,
                &xw,
                &p(params, &format!("{pre}.att_src")),
                &p(params, &format!("{pre}.att_dst")),
                slope,
            );
            outs.push(mm(&att, &xw));
        }
        let b = p(params, &format!("gat{l}.bias"));
        z = if last {
            let mut acc = outs[0].clone();
            for o in &outs[1..] {
                acc = add(&acc, o);
            }
            add_bias(&scale(&acc, 1.0 / heads as f64), &b)
        } else {
            let cat: M = (0..z.len()).map(|i| outs.iter().flat_map(|o| o[i].clone()).collect()).collect();
            relu(&add_bias(&cat, &b))
        };
    }
    z
}

/// Returns (input to the last layer, output).
pub fn oracle_mlp(x: &M, params: &ModelParams, layers: usize) -> (M, M) {
    let mut z = x.clone();
    for l in 0..layers {
        let out = add_bias(
            &mm(&z, &p(params, &format!("mlp{l}.weight"))),
            &p(params, &format!("mlp{l}.bias")),
        );
        if l + 1 == layers {
            return (z, out);
        }
        z = relu(&out);
    }
    unreachable!()
}

pub fn oracle_sgc(ah: &M, x: &M, params: &ModelParams, layers: usize, k: usize) -> M {
    let mut z = x.clone();
    for _ in 0..k {
        z = mm(ah, &z);
    }
    oracle_mlp(&z, params, layers).1
}

pub fn propagate(prop: &M, h: &M, beta: f64, k: usize) -> M {
    let mut z = h.clone();
    for _ in 0..k {
        z = add(&scale(&mm(prop, &z), 1.0 - beta), &scale(h, beta));
    }
    z
}

pub fn oracle_appnp(ah: &M, x: &M, params: &ModelParams, layers: usize, beta: f64, k: usize) -> M {
    let h = oracle_mlp(x, params, layers).1;
    propagate(ah, &h, beta, k)
}

#[allow(clippy::too_many_arguments)]
pub fn oracle_dgat(
    a: &M,
    ah: &M,
    x: &M,
    params: &ModelParams,
    layers: usize,
    heads: usize,
    beta: f64,
    gamma: f64,
    k: usize,
    slope: f64,
) -> M {
    let (z_init, h) = oracle_mlp(x, params, layers);
    let n = a.len();
    let mut pm = zeros(n, n);
    for hd in 0..heads {
        let pre = format!("att.h{hd}");
        let xw = mm(&z_init, &p(params, &format!("{pre}.weight")));
        let att = attention(
            a,
            &xw,
            &p(params, &format!("{pre}.att_src")),
            &p(params, &format!("{pre}.att_dst")),
            slope,
        );
        pm = add(&pm, &att);
    }
    let pm = scale(&pm, 1.0 / heads as f64);
    let blended = add(&scale(&pm, 1.0 - gamma), &scale(ah, gamma));
    propagate(&blended, &h, beta, k)
}
