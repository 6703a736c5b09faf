//! Graph container, adjacency normalization, the on-disk text format and the
//! synthetic distribution-shift generators.

mod generate;
mod io;

pub use generate::{gen_concept_shift, gen_covariate_shift, GeneratorConfig};
pub use io::{load_graph, parse_graph, save_graph, write_graph};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, SparseMatrix};

/// Node subsets of the dual IID/OOD evaluation protocol. Each list is sorted
/// ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub iid_val: Vec<usize>,
    pub iid_test: Vec<usize>,
    pub ood_val: Vec<usize>,
    pub ood_test: Vec<usize>,
}

impl SplitMasks {
    pub const NAMES: [&'static str; 5] = ["train", "iid_val", "iid_test", "ood_val", "ood_test"];

    pub fn by_name(&self, name: &str) -> Option<&Vec<usize>> {
        match name {
            "train" => Some(&self.train),
            "iid_val" => Some(&self.iid_val),
            "iid_test" => Some(&self.iid_test),
            "ood_val" => Some(&self.ood_val),
            "ood_test" => Some(&self.ood_test),
            _ => None,
        }
    }

    pub(crate) fn by_name_mut(&mut self, name: &str) -> Option<&mut Vec<usize>> {
        match name {
            "train" => Some(&mut self.train),
            "iid_val" => Some(&mut self.iid_val),
            "iid_test" => Some(&mut self.iid_test),
            "ood_val" => Some(&mut self.ood_val),
            "ood_test" => Some(&mut self.ood_test),
            _ => None,
        }
    }

    fn all(&self) -> [&Vec<usize>; 5] {
        [
            &self.train,
            &self.iid_val,
            &self.iid_test,
            &self.ood_val,
            &self.ood_test,
        ]
    }

    /// Checks disjointness, non-emptiness and that OOD test environments
    /// never occur in training.
    pub fn validate(&self, n: usize, env_id: &[usize]) -> Result<()> {
        let mut owner = vec![usize::MAX; n];
        for (m, mask) in self.all().iter().enumerate() {
            for &v in mask.iter() {
                if v >= n {
                    return Err(Error::Data(format!(
                        "{} mask holds node {v} but the graph has {n} nodes",
                        Self::NAMES[m]
                    )));
                }
                if owner[v] != usize::MAX {
                    return Err(Error::Data(format!(
                        "node {v} is in both {} and {}",
                        Self::NAMES[owner[v]],
                        Self::NAMES[m]
                    )));
                }
                owner[v] = m;
            }
        }
        for (name, mask) in [
            ("train", &self.train),
            ("iid_test", &self.iid_test),
            ("ood_test", &self.ood_test),
        ] {
            if mask.is_empty() {
                return Err(Error::Data(format!("{name} mask is empty")));
            }
        }
        let train_envs: std::collections::BTreeSet<usize> =
            self.train.iter().map(|&v| env_id[v]).collect();
        if let Some(&v) = self.ood_test.iter().find(|&&v| train_envs.contains(&env_id[v])) {
            return Err(Error::Data(format!(
                "ood_test node {v} belongs to training environment {}",
                env_id[v]
            )));
        }
        Ok(())
    }
}

/// Node-classification graph with environments and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: DenseMatrix,
    adjacency: SparseMatrix,
    labels: Vec<usize>,
    classes: usize,
    env_id: Vec<usize>,
    envs: usize,
    splits: SplitMasks,
}

impl Graph {
    /// Validating constructor. `adjacency` must be symmetric, square, free
    /// of self-loops and sized to the feature rows.
    pub fn new(
        features: DenseMatrix,
        adjacency: SparseMatrix,
        labels: Vec<usize>,
        classes: usize,
        env_id: Vec<usize>,
        envs: usize,
        splits: SplitMasks,
    ) -> Result<Self> {
        let n = features.rows();
        if adjacency.shape() != (n, n) {
            return Err(Error::shape("graph adjacency", (n, n), adjacency.shape()));
        }
        if labels.len() != n || env_id.len() != n {
            return Err(Error::Data(format!(
                "{n} nodes but {} labels and {} environment ids",
                labels.len(),
                env_id.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite node feature".into()));
        }
        if let Some((v, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Data(format!("node {v} has label {y} but only {classes} classes")));
        }
        if let Some((v, &e)) = env_id.iter().enumerate().find(|(_, &e)| e >= envs) {
            return Err(Error::Data(format!(
                "node {v} has environment {e} but only {envs} environments"
            )));
        }
        for r in 0..n {
            if adjacency.get(r, r) != 0.0 {
                return Err(Error::Data(format!("self-loop stored at node {r}")));
            }
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Data("adjacency is not symmetric".into()));
        }
        let mut splits = splits;
        for name in SplitMasks::NAMES {
            splits.by_name_mut(name).expect("known mask").sort_unstable();
        }
        splits.validate(n, &env_id)?;
        Ok(Graph {
            features,
            adjacency,
            labels,
            classes,
            env_id,
            envs,
            splits,
        })
    }

    /// Builds an unweighted adjacency from directed `(i, j)` pairs. Every pair
    /// must appear in both orientations.
    pub fn adjacency_from_directed(n: usize, pairs: &[(usize, usize)]) -> Result<SparseMatrix> {
        let set: std::collections::BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
        for &(i, j) in &set {
            if i >= n || j >= n {
                return Err(Error::Data(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i == j {
                return Err(Error::Data(format!("self-loop ({i}, {i}) in edge list")));
            }
            if !set.contains(&(j, i)) {
                return Err(Error::Data(format!(
                    "asymmetric edge list: ({i}, {j}) present without ({j}, {i})"
                )));
            }
        }
        let trip: Vec<_> = set.iter().map(|&(i, j)| (i, j, 1.0)).collect();
        SparseMatrix::from_triplets(n, n, &trip)
    }

    /// Unweighted symmetric adjacency from undirected `(i, j)` pairs.
    pub fn adjacency_from_undirected(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
        let mut both = Vec::with_capacity(edges.len() * 2);
        for &(i, j) in edges {
            both.push((i, j));
            both.push((j, i));
        }
        Self::adjacency_from_directed(n, &both)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn env_id(&self) -> &[usize] {
        &self.env_id
    }

    pub fn envs(&self) -> usize {
        self.envs
    }

    pub fn splits(&self) -> &SplitMasks {
        &self.splits
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let a = &self.adjacency;
        let mut out = Vec::with_capacity(a.nnz() / 2);
        for r in 0..a.rows() {
            for k in a.row_range(r) {
                let c = a.col_idx()[k];
                if r < c {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .map(|r| self.adjacency.row_range(r).len())
            .collect()
    }

    /// Labels restricted to a node list.
    pub fn labels_of(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().map(|&v| self.labels[v]).collect()
    }

    /// Same graph with a different feature matrix (same row count).
    pub fn with_features(&self, features: DenseMatrix) -> Result<Self> {
        Graph::new(
            features,
            self.adjacency.clone(),
            self.labels.clone(),
            self.classes,
            self.env_id.clone(),
            self.envs,
            self.splits.clone(),
        )
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `d̃ᵢ = deg(i) + 1`.
///
/// The self-loop is stored in its sorted position, so the result shares its
/// pattern with every attention matrix computed over `A + I`.
pub fn normalize_adjacency(g: &Graph) -> SparseMatrix {
    let a = g.adjacency();
    let n = a.rows();
    let deg: Vec<f64> = (0..n).map(|r| (a.row_range(r).len() + 1) as f64).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    row_ptr.push(0);
    let weight = |i: usize, j: usize| 1.0 / (deg[i] * deg[j]).sqrt();
    for r in 0..n {
        let mut self_done = false;
        for k in a.row_range(r) {
            let c = a.col_idx()[k];
            if !self_done && c > r {
                col_idx.push(r);
                values.push(weight(r, r));
                self_done = true;
            }
            col_idx.push(c);
            values.push(weight(r, c));
        }
        if !self_done {
            col_idx.push(r);
            values.push(weight(r, r));
        }
        row_ptr.push(col_idx.len());
    }
    SparseMatrix::new(n, n, row_ptr, col_idx, values).expect("normalized adjacency is valid CSR")
}
