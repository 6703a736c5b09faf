use std::sync::Arc;

use super::{ModelKind, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::tensor::{DenseMatrix, Mode, Rng, SparseMatrix, Tape, Var};

/// Node features plus the normalized adjacency `Â`. The pattern of `Â` is
/// `A + I`, which is also the attention mask.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub features: DenseMatrix,
    pub adj: Arc<SparseMatrix>,
}

impl GraphInputs {
    pub fn new(features: DenseMatrix, adj: SparseMatrix) -> Result<Self> {
        if adj.rows() != features.rows() || adj.cols() != features.rows() {
            return Err(Error::shape("graph inputs", adj.shape(), features.shape()));
        }
        Ok(GraphInputs {
            features,
            adj: Arc::new(adj),
        })
    }

    pub fn from_graph(g: &Graph) -> Self {
        GraphInputs {
            features: g.features().clone(),
            adj: Arc::new(normalize_adjacency(g)),
        }
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Input to the linear head for models that have one, else the logits.
    pub representation: Var,
    /// Attention coefficients (nnz×1), one per head and layer.
    pub attention: Vec<Var>,
    /// DGAT's blended propagation values (nnz×1).
    pub propagation: Option<Var>,
}

impl Forward {
    fn plain(logits: Var) -> Self {
        Forward {
            logits,
            representation: logits,
            attention: Vec::new(),
            propagation: None,
        }
    }
}

struct Bound<'a> {
    params: &'a ModelParams,
    vars: &'a [Var],
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

struct Ctx<'a, 'r> {
    spec: &'a ModelSpec,
    p: Bound<'a>,
    inputs: &'a GraphInputs,
    mode: Mode,
    rng: &'r mut Rng,
}

impl Ctx<'_, '_> {
    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p.get(&format!("{prefix}.weight"))?;
        let b = self.p.get(&format!("{prefix}.bias"))?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    fn activate(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let r = tape.relu(x)?;
        tape.dropout(r, self.spec.dropout, self.mode, self.rng)
    }

    /// Returns (input to the last layer, output of the last layer).
    fn mlp(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let mut z = x;
        for l in 0..self.spec.layers {
            let out = self.linear(tape, z, &format!("mlp{l}"))?;
            if l + 1 == self.spec.layers {
                return Ok((z, out));
            }
            z = self.activate(tape, out)?;
        }
        unreachable!("layers validated to be at least 1")
    }

    /// One attention head over the `A + I` pattern: returns (α, x·W).
    fn attend(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<(Var, Var)> {
        let w = self.p.get(&format!("{prefix}.weight"))?;
        let a_src = self.p.get(&format!("{prefix}.att_src"))?;
        let a_dst = self.p.get(&format!("{prefix}.att_dst"))?;
        let xw = tape.matmul(x, w)?;
        let s = tape.matmul(xw, a_src)?;
        let t = tape.matmul(xw, a_dst)?;
        let e = tape.edge_scores(&self.inputs.adj, s, t)?;
        let e = tape.leaky_relu(e, self.spec.leaky_slope)?;
        let alpha = tape.masked_row_softmax(&self.inputs.adj, e)?;
        Ok((alpha, xw))
    }

    fn head(&self, tape: &mut Tape, rep: Var) -> Result<Forward> {
        let logits = self.linear(tape, rep, "head")?;
        Ok(Forward {
            logits,
            representation: rep,
            attention: Vec::new(),
            propagation: None,
        })
    }

    fn features(&self, tape: &mut Tape) -> Var {
        tape.constant(self.inputs.features.clone())
    }

    fn gcn(&mut self, tape: &mut Tape) -> Result<Forward> {
        let mut z = self.features(tape);
        let minus = self.spec.kind == ModelKind::GcnMinus;
        for l in 0..self.spec.layers {
            let last = l + 1 == self.spec.layers;
            let w = self.p.get(&format!("conv{l}.weight"))?;
            let b = self.p.get(&format!("conv{l}.bias"))?;
            let zw = tape.matmul(z, w)?;
            let az = tape.spmm(&self.inputs.adj, zw)?;
            z = tape.add_row(az, b)?;
            if !(minus && last) {
                z = self.activate(tape, z)?;
            }
        }
        if minus {
            Ok(Forward::plain(z))
        } else {
            self.head(tape, z)
        }
    }

    fn gat(&mut self, tape: &mut Tape) -> Result<Forward> {
        let mut z = self.features(tape);
        let heads = self.spec.heads;
        let mut attention = Vec::new();
        for l in 0..self.spec.layers {
            let last = l + 1 == self.spec.layers;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (alpha, xw) = self.attend(tape, z, &format!("gat{l}.h{h}"))?;
                attention.push(alpha);
                outs.push(tape.spmm_values(&self.inputs.adj, alpha, xw)?);
            }
            let b = self.p.get(&format!("gat{l}.bias"))?;
            if last {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                let mean = tape.scale(acc, 1.0 / heads as f64)?;
                z = tape.add_row(mean, b)?;
            } else {
                let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
                let pre = tape.add_row(cat, b)?;
                z = self.activate(tape, pre)?;
            }
        }
        Ok(Forward {
            attention,
            ..Forward::plain(z)
        })
    }

    fn sgc(&mut self, tape: &mut Tape) -> Result<Forward> {
        let mut x = self.inputs.features.clone();
        for _ in 0..self.spec.steps() {
            x = self.inputs.adj.spmm(&x)?;
        }
        let x = tape.constant(x);
        let (_, out) = self.mlp(tape, x)?;
        Ok(Forward::plain(out))
    }

    fn appnp(&mut self, tape: &mut Tape) -> Result<Forward> {
        let x = self.features(tape);
        let (_, h) = self.mlp(tape, x)?;
        let beta = self.spec.beta;
        let teleport = tape.scale(h, beta)?;
        let mut z = h;
        for _ in 0..self.spec.steps() {
            let az = tape.spmm(&self.inputs.adj, z)?;
            let az = tape.scale(az, 1.0 - beta)?;
            z = tape.add(az, teleport)?;
        }
        Ok(Forward::plain(z))
    }

    fn dgat(&mut self, tape: &mut Tape) -> Result<Forward> {
        let x = self.features(tape);
        let (z_init, h) = self.mlp(tape, x)?;
        let heads = self.spec.heads;
        let mut attention = Vec::with_capacity(heads);
        let mut acc: Option<Var> = None;
        for k in 0..heads {
            let (alpha, _) = self.attend(tape, z_init, &format!("att.h{k}"))?;
            attention.push(alpha);
            acc = Some(match acc {
                None => alpha,
                Some(a) => tape.add(a, alpha)?,
            });
        }
        let p = acc.expect("heads validated to be at least 1");
        let p = if heads > 1 { tape.scale(p, 1.0 / heads as f64)? } else { p };

        let (beta, gamma) = (self.spec.beta, self.spec.gamma);
        let adj = &self.inputs.adj;
        let fixed: Vec<f64> = adj.values().iter().map(|v| gamma * v).collect();
        let fixed = tape.constant(DenseMatrix::from_vec(fixed.len(), 1, fixed)?);
        let learned = tape.scale(p, 1.0 - gamma)?;
        let blended = tape.add(learned, fixed)?;

        let teleport = tape.scale(h, beta)?;
        let mut z = h;
        for _ in 0..self.spec.steps() {
            let az = tape.spmm_values(adj, blended, z)?;
            let az = tape.scale(az, 1.0 - beta)?;
            z = tape.add(az, teleport)?;
        }
        let mut out = if self.spec.linear_head {
            self.head(tape, z)?
        } else {
            Forward::plain(z)
        };
        out.attention = attention;
        out.propagation = Some(blended);
        Ok(out)
    }
}

/// Runs `spec` on `tape` with parameters already recorded as `vars`
/// (in the order of `params`).
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    vars: &[Var],
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Forward> {
    spec.validate()?;
    if vars.len() != params.len() {
        return Err(Error::Config(format!(
            "{} parameter handles for {} tensors",
            vars.len(),
            params.len()
        )));
    }
    let mut cx = Ctx {
        spec,
        p: Bound { params, vars },
        inputs,
        mode,
        rng,
    };
    match spec.kind {
        ModelKind::Gcn | ModelKind::GcnMinus => cx.gcn(tape),
        ModelKind::Gat => cx.gat(tape),
        ModelKind::Sgc => cx.sgc(tape),
        ModelKind::Appnp => cx.appnp(tape),
        ModelKind::Dgat => cx.dgat(tape),
    }
}

/// Applies the model's linear head to an arbitrary representation.
pub fn apply_head(tape: &mut Tape, spec: &ModelSpec, params: &ModelParams, vars: &[Var], rep: Var) -> Result<Var> {
    if !spec.has_head() {
        return Err(Error::Config(format!("{} has no linear head", spec.kind)));
    }
    let p = Bound { params, vars };
    let xw = tape.matmul(rep, p.get("head.weight")?)?;
    tape.add_row(xw, p.get("head.bias")?)
}

/// Logits for every node, with no gradient tracking.
pub fn forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = forward_on_tape(&mut tape, spec, params, &vars, inputs, mode, rng)?;
    Ok(tape.value(out.logits).clone())
}

fn checked(spec: &ModelSpec, want: &[ModelKind]) -> Result<()> {
    if want.contains(&spec.kind) {
        Ok(())
    } else {
        Err(Error::Config(format!("spec kind {} does not match this forward", spec.kind)))
    }
}

pub fn gcn_forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    checked(spec, &[ModelKind::Gcn, ModelKind::GcnMinus])?;
    forward(spec, params, inputs, mode, rng)
}

pub fn gat_forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    checked(spec, &[ModelKind::Gat])?;
    forward(spec, params, inputs, mode, rng)
}

pub fn sgc_forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    checked(spec, &[ModelKind::Sgc])?;
    forward(spec, params, inputs, mode, rng)
}

pub fn appnp_forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    checked(spec, &[ModelKind::Appnp])?;
    forward(spec, params, inputs, mode, rng)
}

pub fn dgat_forward(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    checked(spec, &[ModelKind::Dgat])?;
    forward(spec, params, inputs, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;
    use crate::tensor::rng;

    fn path_inputs(n: usize, d: usize) -> GraphInputs {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        let a = Graph::adjacency_from_undirected(n, &edges).unwrap();
        let feats = DenseMatrix::from_fn(n, d, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4);
        let mut inputs = GraphInputs {
            features: feats,
            adj: Arc::new(a),
        };
        inputs.adj = Arc::new(normalized(&inputs.adj));
        inputs
    }

    fn normalized(a: &SparseMatrix) -> SparseMatrix {
        let n = a.rows();
        let mut t = Vec::new();
        for r in 0..n {
            t.push((r, r, 1.0));
            for k in a.row_range(r) {
                t.push((r, a.col_idx()[k], 1.0));
            }
        }
        let s = SparseMatrix::from_triplets(n, n, &t).unwrap();
        let deg = s.row_sums();
        let vals: Vec<f64> = (0..n)
            .flat_map(|r| s.row_range(r).map(move |k| (r, k)))
            .map(|(r, k)| 1.0 / (deg[r] * deg[s.col_idx()[k]]).sqrt())
            .collect();
        s.with_values(vals).unwrap()
    }

    fn eval(spec: &ModelSpec, params: &ModelParams, inputs: &GraphInputs) -> DenseMatrix {
        let mut r = rng::stream(0, "test", 0);
        forward(spec, params, inputs, Mode::Eval, &mut r).unwrap()
    }

    #[test]
    fn gcn_minus_identity_on_two_nodes() {
        let adj = SparseMatrix::from_triplets(2, 2, &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)]).unwrap();
        let inputs = GraphInputs::new(DenseMatrix::identity(2), adj).unwrap();
        let spec = ModelSpec::new(ModelKind::GcnMinus, 1, 4);
        let mut p = init_params(&spec, 2, 2, 0).unwrap();
        *p.get_mut("conv0.weight").unwrap() = DenseMatrix::identity(2);
        let out = eval(&spec, &p, &inputs);
        assert_eq!(out, DenseMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]));
    }

    #[test]
    fn every_kind_runs_and_is_deterministic() {
        let inputs = path_inputs(6, 3);
        for kind in ModelKind::ALL {
            let mut spec = ModelSpec::new(kind, 2, 5);
            if kind.uses_attention() {
                spec.heads = 2;
            }
            spec.beta = 0.2;
            spec.gamma = 0.5;
            spec.dropout = 0.3;
            let p = init_params(&spec, 3, 4, 11).unwrap();
            let mut r1 = rng::stream(1, "dropout", 0);
            let mut r2 = rng::stream(1, "dropout", 0);
            let a = forward(&spec, &p, &inputs, Mode::Train, &mut r1).unwrap();
            let b = forward(&spec, &p, &inputs, Mode::Train, &mut r2).unwrap();
            assert_eq!(a.shape(), (6, 4), "{kind}");
            assert!(a.is_finite());
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn wrong_kind_and_missing_head() {
        let inputs = path_inputs(4, 2);
        let spec = ModelSpec::new(ModelKind::Sgc, 1, 3);
        let p = init_params(&spec, 2, 2, 0).unwrap();
        let mut r = rng::stream(0, "x", 0);
        assert!(matches!(gcn_forward(&spec, &p, &inputs, Mode::Eval, &mut r), Err(Error::Config(_))));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(DenseMatrix::zeros(4, 3));
        assert!(matches!(apply_head(&mut tape, &spec, &p, &vars, x), Err(Error::Config(_))));
    }

    #[test]
    fn feature_dim_mismatch_is_shape_error() {
        let inputs = path_inputs(4, 3);
        let spec = ModelSpec::new(ModelKind::Gcn, 2, 3);
        let p = init_params(&spec, 5, 2, 0).unwrap();
        let mut r = rng::stream(0, "x", 0);
        assert!(matches!(forward(&spec, &p, &inputs, Mode::Eval, &mut r), Err(Error::Shape { .. })));
    }
}
