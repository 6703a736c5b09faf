//! Information-bottleneck soft clustering with a shared Gaussian covariance,
//! and a check that its mean update coincides with an attention
//! aggregation under the substitution `W_K x_c = 2μ_c`, `W_Q = Σ⁻¹`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rng, DenseMatrix};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    pub fn new(sigma: &DenseMatrix) -> Result<Self> {
        let (n, m) = sigma.shape();
        if n != m || n == 0 {
            return Err(Error::shape("cholesky", (n, n), (n, m)));
        }
        let mut l = DenseMatrix::zeros(n, n);
        let mut pivots = Vec::with_capacity(n);
        for j in 0..n {
            let mut s = sigma.get(j, j);
            for k in 0..j {
                s -= l.get(j, k) * l.get(j, k);
            }
            let diag_scale = sigma.get(j, j).abs().max(f64::MIN_POSITIVE);
            if !(s > 1e-13 * diag_scale) {
                let (lo, hi) = pivots
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(a, b), &p: &f64| (a.min(p), b.max(p)));
                return Err(Error::Numerical(format!(
                    "covariance is singular or indefinite: pivot {j} is {s:e} (previous pivots span {lo:e}..{hi:e}, condition estimate {:e})",
                    if s > 0.0 { hi.max(s) / s } else { f64::INFINITY }
                )));
            }
            pivots.push(s);
            let d = s.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut v = sigma.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v / d);
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// `vᵀ Σ⁻¹ v` via one forward substitution.
    pub fn quad(&self, v: &[f64]) -> f64 {
        self.forward(v).iter().map(|y| y * y).sum()
    }

    fn forward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let y = self.forward(v);
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l.get(k, i) * x[k];
            }
            x[i] = s / self.l.get(i, i);
        }
        x
    }

    /// `Σ⁻¹` column by column.
    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let e: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i == j))).collect();
            for (i, v) in self.solve(&e).into_iter().enumerate() {
                inv.set(i, j, v);
            }
        }
        inv
    }
}

/// Soft clustering state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IBState {
    /// `p(c|i)`, one row per point.
    pub assignments: DenseMatrix,
    pub priors: Vec<f64>,
    /// One row per cluster.
    pub means: DenseMatrix,
    pub sigma: DenseMatrix,
    /// Floor applied to priors before taking logarithms.
    pub epsilon: f64,
}

impl IBState {
    pub fn new(
        assignments: DenseMatrix,
        priors: Vec<f64>,
        means: DenseMatrix,
        sigma: DenseMatrix,
        epsilon: f64,
    ) -> Result<Self> {
        let s = IBState {
            assignments,
            priors,
            means,
            sigma,
            epsilon,
        };
        s.validate()?;
        Ok(s)
    }

    /// Uniform assignments and priors around the given initial means.
    pub fn initial(n: usize, means: DenseMatrix, sigma: DenseMatrix, epsilon: f64) -> Result<Self> {
        let c = means.rows();
        if c == 0 {
            return Err(Error::Config("at least one cluster is required".into()));
        }
        Self::new(
            DenseMatrix::filled(n, c, 1.0 / c as f64),
            vec![1.0 / c as f64; c],
            means,
            sigma,
            epsilon,
        )
    }

    pub fn clusters(&self) -> usize {
        self.means.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.means.rows();
        let d = self.means.cols();
        if self.assignments.cols() != c || self.priors.len() != c {
            return Err(Error::shape("ib state", (self.assignments.rows(), c), self.assignments.shape()));
        }
        if self.sigma.shape() != (d, d) {
            return Err(Error::shape("ib covariance", (d, d), self.sigma.shape()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("smoothing epsilon {} must be positive", self.epsilon)));
        }
        for r in 0..self.assignments.rows() {
            let row = self.assignments.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Numerical(format!("assignment row {r} is not a distribution (sum {s})")));
            }
        }
        let s: f64 = self.priors.iter().sum();
        if (s - 1.0).abs() > 1e-12 || self.priors.iter().any(|&p| p < 0.0) {
            return Err(Error::Numerical(format!("priors are not a distribution (sum {s})")));
        }
        for i in 0..d {
            for j in 0..i {
                if (self.sigma.get(i, j) - self.sigma.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Numerical(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Cholesky::new(&self.sigma).map(|_| ())
    }

    fn log_prior(&self, c: usize) -> f64 {
        self.priors[c].max(self.epsilon).ln()
    }
}

/// `(μ_c − x_i)ᵀ Σ⁻¹ (μ_c − x_i)` for every point and cluster.
fn distances(chol: &Cholesky, means: &DenseMatrix, points: &DenseMatrix) -> DenseMatrix {
    let mut diff = vec![0.0; points.cols()];
    DenseMatrix::from_fn(points.rows(), means.rows(), |i, c| {
        for (k, d) in diff.iter_mut().enumerate() {
            *d = means.get(c, k) - points.get(i, k);
        }
        chol.quad(&diff)
    })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn check_points(state: &IBState, points: &DenseMatrix) -> Result<()> {
    if points.cols() != state.means.cols() || points.rows() != state.assignments.rows() {
        return Err(Error::shape(
            "ib points",
            (state.assignments.rows(), state.means.cols()),
            points.shape(),
        ));
    }
    if points.rows() < state.clusters() {
        return Err(Error::Config(format!(
            "{} points cannot fill {} clusters",
            points.rows(),
            state.clusters()
        )));
    }
    Ok(())
}

/// One update: assignments from the previous priors and means, then soft
/// counts for priors and assignment-weighted means.
pub fn ib_iterate(state: &IBState, points: &DenseMatrix) -> Result<IBState> {
    check_points(state, points)?;
    let chol = Cholesky::new(&state.sigma)?;
    let (n, c, d) = (points.rows(), state.clusters(), points.cols());
    let dist = distances(&chol, &state.means, points);
    let mut assign = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let row = assign.row_mut(i);
        for (k, v) in row.iter_mut().enumerate() {
            *v = state.log_prior(k) - dist.get(i, k);
        }
        softmax_in_place(row);
    }
    let mut mass = vec![0.0; c];
    for i in 0..n {
        for (k, m) in mass.iter_mut().enumerate() {
            *m += assign.get(i, k);
        }
    }
    let priors: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();
    let mut means = state.means.clone();
    for k in 0..c {
        if mass[k] == 0.0 {
            continue;
        }
        for j in 0..d {
            let s: f64 = (0..n).map(|i| assign.get(i, k) * points.get(i, j)).sum();
            means.set(k, j, s / mass[k]);
        }
    }
    if !means.is_finite() {
        return Err(Error::Numerical("cluster means became non-finite".into()));
    }
    Ok(IBState {
        assignments: assign,
        priors,
        means,
        sigma: state.sigma.clone(),
        epsilon: state.epsilon,
    })
}

/// Mutual information between points and clusters under the state's
/// assignments and priors: `(1/n) Σ p(c|i) log(p(c|i)/p(c))`.
pub fn ib_information(state: &IBState) -> f64 {
    let n = state.assignments.rows();
    let mut total = 0.0;
    for i in 0..n {
        for (c, &q) in state.assignments.row(i).iter().enumerate() {
            if q > 0.0 {
                total += q * (q.ln() - state.log_prior(c));
            }
        }
    }
    total / n as f64
}

/// Clustering free energy: the information term plus the expected
/// Mahalanobis distortion. Non-increasing under [`ib_iterate`].
pub fn ib_objective(state: &IBState, points: &DenseMatrix) -> Result<f64> {
    check_points(state, points)?;
    let chol = Cholesky::new(&state.sigma)?;
    let dist = distances(&chol, &state.means, points);
    let n = points.rows();
    let mut distortion = 0.0;
    for i in 0..n {
        for (c, &q) in state.assignments.row(i).iter().enumerate() {
            distortion += q * dist.get(i, c);
        }
    }
    Ok(ib_information(state) + distortion / n as f64)
}

/// Computes the next means twice, once by the clustering update and once by
/// attention with keys `2μ_c`, query transform `Σ⁻¹` and the same
/// per-cluster scale `1/Σ_i p(c|i)`. Returns the largest elementwise gap.
///
/// Requires uniform priors and equal `μ_cᵀ Σ⁻¹ μ_c` across clusters.
pub fn attention_equivalence_check(state: &IBState, points: &DenseMatrix) -> Result<f64> {
    check_points(state, points)?;
    let chol = Cholesky::new(&state.sigma)?;
    let (n, c, d) = (points.rows(), state.clusters(), points.cols());

    let uniform = 1.0 / c as f64;
    if let Some(k) = state.priors.iter().position(|p| (p - uniform).abs() > 1e-12) {
        return Err(Error::Protocol(format!(
            "prior of cluster {k} is {} but the check needs uniform priors ({uniform})",
            state.priors[k]
        )));
    }
    let norms: Vec<f64> = (0..c).map(|k| chol.quad(state.means.row(k))).collect();
    for (k, &nk) in norms.iter().enumerate().skip(1) {
        if (nk - norms[0]).abs() > 1e-10 * norms[0].abs().max(1.0) {
            return Err(Error::Protocol(format!(
                "cluster {k} breaks the Σ⁻¹ normalisation: μᵀΣ⁻¹μ = {nk} vs {} for cluster 0",
                norms[0]
            )));
        }
    }

    let next = ib_iterate(state, points)?;
    let mass: Vec<f64> = (0..c).map(|k| (0..n).map(|i| next.assignments.get(i, k)).sum()).collect();

    // Attention side: scores ⟨W_K x_c, W_Q x_j⟩ = 2μ_cᵀ Σ⁻¹ x_j.
    let w_q = chol.inverse();
    let keys = state.means.scale(2.0);
    let queries = points.matmul_t(&w_q).expect("square Σ⁻¹");
    let mut alpha = keys.matmul_t(&queries).expect("matching widths");
    for j in 0..n {
        let mut col: Vec<f64> = (0..c).map(|k| alpha.get(k, j)).collect();
        softmax_in_place(&mut col);
        for (k, v) in col.into_iter().enumerate() {
            alpha.set(k, j, v);
        }
    }
    let mut worst = 0.0f64;
    for k in 0..c {
        // η = 1/n_c, applied as a division like the clustering side.
        for t in 0..d {
            let z = (0..n).map(|j| alpha.get(k, j) * points.get(j, t)).sum::<f64>() / mass[k];
            worst = worst.max((z - next.means.get(k, t)).abs());
        }
    }
    Ok(worst)
}

/// Result of iterating to convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbRun {
    pub state: IBState,
    pub iterations: usize,
    pub converged: bool,
    /// Objective before the first update and after every update.
    pub objective_trace: Vec<f64>,
}

/// Iterates until the largest assignment change drops below `tol` or
/// `max_iter` updates have run.
pub fn ib_run(state: &IBState, points: &DenseMatrix, max_iter: usize, tol: f64) -> Result<IbRun> {
    let mut cur = state.clone();
    let mut trace = vec![ib_objective(&cur, points)?];
    for it in 1..=max_iter {
        let next = ib_iterate(&cur, points)?;
        let change = next
            .assignments
            .max_abs_diff(&cur.assignments);
        trace.push(ib_objective(&next, points)?);
        cur = next;
        if change < tol {
            return Ok(IbRun {
                state: cur,
                iterations: it,
                converged: true,
                objective_trace: trace,
            });
        }
    }
    Ok(IbRun {
        state: cur,
        iterations: max_iter,
        converged: false,
        objective_trace: trace,
    })
}

pub const MAX_ITER: usize = 200;
pub const TOLERANCE: f64 = 1e-10;

/// Points, ground-truth membership (if any) and an initial state.
#[derive(Debug, Clone)]
pub struct IbFixture {
    pub points: DenseMatrix,
    pub membership: Option<Vec<usize>>,
    pub state: IBState,
}

/// Two Gaussian blobs centred at `(±5, 0)` with spread 0.1, 20 points each,
/// interleaved. Initial means sit on the unit circle.
pub fn two_blob_fixture(seed: u64) -> IbFixture {
    let mut r = rng::stream(seed, "ib-two-blob", 0);
    let normal = rand_distr::Normal::new(0.0, 0.1).expect("valid spread");
    let n = 40;
    let membership: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let points = DenseMatrix::from_fn(n, 2, |i, j| {
        let centre = if j == 0 { if membership[i] == 0 { -5.0 } else { 5.0 } } else { 0.0 };
        centre + r.sample(normal)
    });
    let (s, c) = (0.6f64.sin(), 0.6f64.cos());
    let means = DenseMatrix::from_rows(&[&[-c, s], &[c, -s]]);
    let state = IBState::initial(n, means, DenseMatrix::identity(2), 1e-12).expect("valid fixture");
    IbFixture {
        points,
        membership: Some(membership),
        state,
    }
}

/// Identity covariance, three means of norm 2 in the plane, 30 random
/// points.
pub fn sphere_fixture(seed: u64) -> IbFixture {
    let mut r = rng::stream(seed, "ib-sphere", 0);
    let points = DenseMatrix::from_fn(30, 2, |_, _| r.gen_range(-3.0..3.0));
    let angles = [0.3f64, 2.4, 4.4];
    let means = DenseMatrix::from_fn(3, 2, |k, j| {
        2.0 * if j == 0 { angles[k].cos() } else { angles[k].sin() }
    });
    let state = IBState::initial(30, means, DenseMatrix::identity(2), 1e-12).expect("valid fixture");
    IbFixture {
        points,
        membership: None,
        state,
    }
}

/// Random positive-definite covariance in four dimensions, three means
/// rescaled to `μᵀΣ⁻¹μ = 1`, 50 random points.
pub fn random_fixture(seed: u64) -> IbFixture {
    let mut r = rng::stream(seed, "ib-random", 0);
    let d = 4;
    let a = DenseMatrix::from_fn(d, d, |_, _| r.gen_range(-1.0..1.0));
    let sigma = a.matmul_t(&a).expect("square").add(&DenseMatrix::identity(d)).expect("square");
    // Symmetrise exactly.
    let sigma = DenseMatrix::from_fn(d, d, |i, j| 0.5 * (sigma.get(i, j) + sigma.get(j, i)));
    let chol = Cholesky::new(&sigma).expect("AAᵀ + I is positive definite");
    let mut means = DenseMatrix::from_fn(3, d, |_, _| r.gen_range(-1.0..1.0));
    for k in 0..3 {
        let s = chol.quad(means.row(k)).sqrt();
        for v in means.row_mut(k) {
            *v /= s;
        }
    }
    let points = DenseMatrix::from_fn(50, d, |_, _| r.gen_range(-2.0..2.0));
    let state = IBState::initial(50, means, sigma, 1e-12).expect("valid fixture");
    IbFixture {
        points,
        membership: None,
        state,
    }
}

/// JSON-friendly summary for one fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbReport {
    pub deviation: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

pub fn verify(fixture: &IbFixture) -> Result<IbReport> {
    let deviation = attention_equivalence_check(&fixture.state, &fixture.points)?;
    let run = ib_run(&fixture.state, &fixture.points, MAX_ITER, TOLERANCE)?;
    Ok(IbReport {
        deviation,
        objective_trace: run.objective_trace,
        converged: run.converged,
    })
}
