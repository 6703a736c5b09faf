//! Synthetic graphs with controlled distribution shift.
//!
//! Both generators start from the same base: a degree-corrected stochastic
//! block model with one block per class and Gaussian node features centred
//! on a per-class mean. The covariate generator then assigns environments by
//! degree quantile; the concept generator assigns environments at random and
//! appends a spurious block whose agreement with the label differs between
//! training and OOD environments.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{Graph, SplitMasks};
use crate::error::{Error, Result};
use crate::tensor::{rng, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub nodes: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub envs: usize,
    /// Edge probability between two nodes of the same class (before degree
    /// correction).
    pub p_in: f64,
    /// Edge probability across classes.
    pub p_out: f64,
    /// Log-normal sigma of the per-node degree propensity.
    pub degree_spread: f64,
    /// Norm of each class mean in feature space.
    pub class_sep: f64,
    pub feature_noise: f64,
    /// Width of the spurious block (concept shift only).
    pub spurious_dim: usize,
    pub spurious_scale: f64,
    pub spurious_noise: f64,
    /// Fractions of training-environment nodes used for train / iid_val; the
    /// remainder is iid_test.
    pub train_frac: f64,
    pub iid_val_frac: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            nodes: 1000,
            classes: 4,
            feature_dim: 16,
            envs: 4,
            p_in: 0.03,
            p_out: 0.002,
            degree_spread: 0.5,
            class_sep: 1.0,
            feature_noise: 1.0,
            spurious_dim: 4,
            spurious_scale: 1.0,
            spurious_noise: 0.1,
            train_frac: 0.6,
            iid_val_frac: 0.2,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.envs < 4 {
            return bad(format!(
                "{} environments; at least 4 are needed (2 training, 2 OOD)",
                self.envs
            ));
        }
        if self.nodes < 5 * self.envs {
            return bad(format!(
                "{} nodes cannot fill {} environments (need at least {})",
                self.nodes,
                self.envs,
                5 * self.envs
            ));
        }
        if self.classes < 2 || self.feature_dim == 0 {
            return bad("need at least 2 classes and 1 feature".into());
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.train_frac <= 0.0
            || self.iid_val_frac < 0.0
            || self.train_frac + self.iid_val_frac >= 1.0
        {
            return bad("split fractions must leave room for train and iid_test".into());
        }
        if self.degree_spread < 0.0 || self.feature_noise < 0.0 || self.spurious_noise < 0.0 {
            return bad("spreads and noise levels must be non-negative".into());
        }
        Ok(())
    }

    fn train_env_count(&self) -> usize {
        self.envs / 2
    }
}

struct Base {
    features: DenseMatrix,
    edges: Vec<(usize, usize)>,
    labels: Vec<usize>,
}

fn base_graph(cfg: &GeneratorConfig, seed: u64) -> Base {
    let n = cfg.nodes;
    let mut label_rng = rng::stream(seed, "labels", 0);
    let labels: Vec<usize> = (0..n).map(|_| label_rng.gen_range(0..cfg.classes)).collect();

    let mut theta_rng = rng::stream(seed, "degree", 0);
    let theta: Vec<f64> = if cfg.degree_spread > 0.0 {
        let ln = LogNormal::new(0.0, cfg.degree_spread).expect("valid sigma");
        let raw: Vec<f64> = (0..n).map(|_| ln.sample(&mut theta_rng)).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        raw.into_iter().map(|t| t / mean).collect()
    } else {
        vec![1.0; n]
    };

    let mut edge_rng = rng::stream(seed, "edges", 0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            let p = (p * theta[i] * theta[j]).min(1.0);
            if edge_rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mean_rng = rng::stream(seed, "class-means", 0);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| std_normal.sample(&mut mean_rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| cfg.class_sep * x / norm).collect()
        })
        .collect();
    let mut feat_rng = rng::stream(seed, "features", 0);
    let features = DenseMatrix::from_fn(n, cfg.feature_dim, |i, j| {
        means[labels[i]][j] + cfg.feature_noise * std_normal.sample(&mut feat_rng)
    });

    Base {
        features,
        edges,
        labels,
    }
}

/// Assigns train / iid_val / iid_test within the training environments and
/// splits the OOD environments into ood_val (lower half) and ood_test.
fn make_splits(cfg: &GeneratorConfig, env_id: &[usize], seed: u64) -> SplitMasks {
    let train_envs = cfg.train_env_count();
    let ood_val_envs = (cfg.envs - train_envs) / 2;
    let mut in_dist: Vec<usize> = (0..env_id.len()).filter(|&v| env_id[v] < train_envs).collect();
    in_dist.shuffle(&mut rng::stream(seed, "splits", 0));
    let m = in_dist.len();
    let n_train = ((m as f64 * cfg.train_frac).round() as usize).clamp(1, m - 1);
    let n_val = ((m as f64 * cfg.iid_val_frac).round() as usize).min(m - 1 - n_train);
    let mut s = SplitMasks {
        train: in_dist[..n_train].to_vec(),
        iid_val: in_dist[n_train..n_train + n_val].to_vec(),
        iid_test: in_dist[n_train + n_val..].to_vec(),
        ood_val: Vec::new(),
        ood_test: Vec::new(),
    };
    for (v, &e) in env_id.iter().enumerate() {
        if e >= train_envs + ood_val_envs {
            s.ood_test.push(v);
        } else if e >= train_envs {
            s.ood_val.push(v);
        }
    }
    s
}

/// Degree-domain covariate shift: environments are degree quantiles and the
/// highest-degree environments are held out as OOD.
pub fn gen_covariate_shift(cfg: &GeneratorConfig, seed: u64) -> Result<Graph> {
    cfg.validate()?;
    let base = base_graph(cfg, seed);
    let n = cfg.nodes;
    let adjacency = Graph::adjacency_from_undirected(n, &base.edges)?;
    let deg: Vec<usize> = (0..n).map(|r| adjacency.row_range(r).len()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (deg[v], v));
    let mut env_id = vec![0; n];
    for (rank, &v) in order.iter().enumerate() {
        env_id[v] = rank * cfg.envs / n;
    }
    let splits = make_splits(cfg, &env_id, seed);
    Graph::new(
        base.features,
        adjacency,
        base.labels,
        cfg.classes,
        env_id,
        cfg.envs,
        splits,
    )
}

/// Spurious-feature concept shift. Environments are random equal-size
/// groups; the appended block carries a one-hot code of the label with
/// probability `spurious_corr_train` in training environments and
/// `spurious_corr_ood` in OOD environments, otherwise a uniformly drawn wrong
/// label. The first `feature_dim` columns are exactly the base features.
pub fn gen_concept_shift(
    cfg: &GeneratorConfig,
    spurious_corr_train: f64,
    spurious_corr_ood: f64,
    seed: u64,
) -> Result<Graph> {
    cfg.validate()?;
    for (name, p) in [
        ("spurious_corr_train", spurious_corr_train),
        ("spurious_corr_ood", spurious_corr_ood),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} = {p} is not a probability")));
        }
    }
    if cfg.spurious_dim == 0 {
        return Err(Error::Config("spurious block needs a positive width".into()));
    }
    if cfg.spurious_dim < cfg.classes {
        return Err(Error::Config(format!(
            "one-hot spurious code needs width >= {} classes, got {}",
            cfg.classes, cfg.spurious_dim
        )));
    }
    let base = base_graph(cfg, seed);
    let n = cfg.nodes;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, "concept-envs", 0));
    let mut env_id = vec![0; n];
    for (rank, &v) in perm.iter().enumerate() {
        env_id[v] = rank * cfg.envs / n;
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sp_rng = rng::stream(seed, "spurious", 0);
    let d = cfg.feature_dim;
    let width = d + cfg.spurious_dim;
    let mut features = DenseMatrix::zeros(n, width);
    for v in 0..n {
        features.row_mut(v)[..d].copy_from_slice(base.features.row(v));
        let corr = if env_id[v] < cfg.train_env_count() {
            spurious_corr_train
        } else {
            spurious_corr_ood
        };
        let y = base.labels[v];
        let code = if sp_rng.gen::<f64>() < corr {
            y
        } else {
            let k = sp_rng.gen_range(0..cfg.classes - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        };
        for j in 0..cfg.spurious_dim {
            let hot = if j == code { cfg.spurious_scale } else { 0.0 };
            features.set(v, d + j, hot + cfg.spurious_noise * noise.sample(&mut sp_rng));
        }
    }

    let adjacency = Graph::adjacency_from_undirected(n, &base.edges)?;
    let splits = make_splits(cfg, &env_id, seed);
    Graph::new(
        features,
        adjacency,
        base.labels,
        cfg.classes,
        env_id,
        cfg.envs,
        splits,
    )
}
