//! The six node-classification architectures behind one interface:
//! `ModelSpec` → `ModelParams` → (graph, mode) → logits.

mod forward;

pub use forward::{
    appnp_forward, apply_head, dgat_forward, forward, forward_on_tape, gat_forward, gcn_forward,
    sgc_forward, Forward, GraphInputs,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rng, DenseMatrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "GCN_MINUS")]
    GcnMinus,
    #[serde(rename = "GAT")]
    Gat,
    #[serde(rename = "SGC")]
    Sgc,
    #[serde(rename = "APPNP")]
    Appnp,
    #[serde(rename = "DGAT")]
    Dgat,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Gcn,
        ModelKind::GcnMinus,
        ModelKind::Gat,
        ModelKind::Sgc,
        ModelKind::Appnp,
        ModelKind::Dgat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gcn => "GCN",
            ModelKind::GcnMinus => "GCN_MINUS",
            ModelKind::Gat => "GAT",
            ModelKind::Sgc => "SGC",
            ModelKind::Appnp => "APPNP",
            ModelKind::Dgat => "DGAT",
        }
    }

    fn uses_attention(self) -> bool {
        matches!(self, ModelKind::Gat | ModelKind::Dgat)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

fn default_slope() -> f64 {
    0.2
}

fn default_heads() -> usize {
    1
}

/// Architecture tag plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Graph-convolution layers for GCN/GAT; MLP depth for SGC/APPNP/DGAT.
    pub layers: usize,
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Teleport weight of the initial prediction in APPNP/DGAT propagation.
    #[serde(default)]
    pub beta: f64,
    /// Weight of the normalized adjacency in DGAT's blended propagation.
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Propagation steps K for SGC/APPNP/DGAT; defaults to `layers`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prop_steps: Option<usize>,
    /// Appends a linear prediction layer to DGAT (ablation only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub linear_head: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, layers: usize, hidden: usize) -> Self {
        ModelSpec {
            kind,
            layers,
            hidden,
            heads: 1,
            beta: 0.0,
            gamma: 0.0,
            dropout: 0.0,
            leaky_slope: default_slope(),
            prop_steps: None,
            linear_head: false,
        }
    }

    pub fn steps(&self) -> usize {
        self.prop_steps.unwrap_or(self.layers)
    }

    /// GCN always ends in a linear head; DGAT only when asked.
    pub fn has_head(&self) -> bool {
        match self.kind {
            ModelKind::Gcn => true,
            ModelKind::Dgat => self.linear_head,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.layers) {
            return bad(format!("layers = {} outside 1..=3", self.layers));
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be at least 1".into());
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if matches!(self.kind, ModelKind::Appnp | ModelKind::Dgat) && self.steps() == 0 {
            return bad(format!("{} needs at least one propagation step", self.kind));
        }
        if self.linear_head && !matches!(self.kind, ModelKind::Dgat | ModelKind::Gcn) {
            return bad(format!("linear_head is not defined for {}", self.kind));
        }
        if !self.kind.uses_attention() && self.heads != 1 {
            return bad(format!("{} has no attention heads", self.kind));
        }
        Ok(())
    }
}

/// Shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bias: bool,
}

fn weight(name: String, rows: usize, cols: usize) -> ParamShape {
    ParamShape {
        name,
        rows,
        cols,
        bias: false,
    }
}

fn bias(name: String, cols: usize) -> ParamShape {
    ParamShape {
        name,
        rows: 1,
        cols,
        bias: true,
    }
}

fn mlp_layout(out: &mut Vec<ParamShape>, layers: usize, d_in: usize, hidden: usize, d_out: usize) {
    for l in 0..layers {
        let i = if l == 0 { d_in } else { hidden };
        let o = if l + 1 == layers { d_out } else { hidden };
        out.push(weight(format!("mlp{l}.weight"), i, o));
        out.push(bias(format!("mlp{l}.bias"), o));
    }
}

fn attention_layout(out: &mut Vec<ParamShape>, prefix: &str, heads: usize, d_in: usize, width: usize) {
    for h in 0..heads {
        out.push(weight(format!("{prefix}.h{h}.weight"), d_in, width));
        out.push(weight(format!("{prefix}.h{h}.att_src"), width, 1));
        out.push(weight(format!("{prefix}.h{h}.att_dst"), width, 1));
    }
}

/// Parameter shapes, in storage order, for `spec` on `d_in` input features
/// and `c` classes.
pub fn param_layout(spec: &ModelSpec, d_in: usize, c: usize) -> Vec<ParamShape> {
    let (l_n, d) = (spec.layers, spec.hidden);
    let mut out = Vec::new();
    match spec.kind {
        ModelKind::Gcn | ModelKind::GcnMinus => {
            for l in 0..l_n {
                let i = if l == 0 { d_in } else { d };
                let o = if l + 1 == l_n && spec.kind == ModelKind::GcnMinus { c } else { d };
                out.push(weight(format!("conv{l}.weight"), i, o));
                out.push(bias(format!("conv{l}.bias"), o));
            }
        }
        ModelKind::Gat => {
            for l in 0..l_n {
                let i = if l == 0 { d_in } else { d * spec.heads };
                let last = l + 1 == l_n;
                let o = if last { c } else { d };
                attention_layout(&mut out, &format!("gat{l}"), spec.heads, i, o);
                out.push(bias(format!("gat{l}.bias"), if last { c } else { d * spec.heads }));
            }
        }
        ModelKind::Sgc | ModelKind::Appnp => mlp_layout(&mut out, l_n, d_in, d, c),
        ModelKind::Dgat => {
            let prop_width = if spec.linear_head { d } else { c };
            mlp_layout(&mut out, l_n, d_in, d, prop_width);
            let z_init = if l_n >= 2 { d } else { d_in };
            attention_layout(&mut out, "att", spec.heads, z_init, d);
        }
    }
    if spec.has_head() {
        out.push(weight("head.weight".into(), d, c));
        out.push(bias("head.bias".into(), c));
    }
    out
}

/// Named parameter tensors for one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<DenseMatrix>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_parts(names: Vec<String>, tensors: Vec<DenseMatrix>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            names,
            tensors,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[DenseMatrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        if self.index.len() == self.names.len() {
            self.index.get(name).copied()
        } else {
            self.names.iter().position(|n| n == name)
        }
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(DenseMatrix::len).sum()
    }

    /// Records every tensor on `tape`, trainable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Glorot-uniform weights, zero biases. Each tensor draws from its own
/// stream keyed by its name, so architectures that share a sub-network
/// (APPNP's MLP inside DGAT, for instance) start from identical values.
pub fn init_params(spec: &ModelSpec, d_in: usize, c: usize, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    if d_in == 0 || c == 0 {
        return Err(Error::Config(format!("input dim {d_in} and classes {c} must be positive")));
    }
    let layout = param_layout(spec, d_in, c);
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for p in layout {
        let t = if p.bias {
            DenseMatrix::zeros(p.rows, p.cols)
        } else {
            let bound = (6.0 / (p.rows + p.cols) as f64).sqrt();
            let mut r = rng::stream(seed, &p.name, 0);
            DenseMatrix::from_fn(p.rows, p.cols, |_, _| r.gen_range(-bound..=bound))
        };
        names.push(p.name);
        tensors.push(t);
    }
    Ok(ModelParams::from_parts(names, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec {
            heads: 2,
            ..ModelSpec::new(ModelKind::Dgat, 2, 8)
        };
        assert_eq!(init_params(&spec, 5, 3, 4).unwrap(), init_params(&spec, 5, 3, 4).unwrap());
        assert_ne!(init_params(&spec, 5, 3, 4).unwrap(), init_params(&spec, 5, 3, 5).unwrap());
    }

    #[test]
    fn gcn_param_counts() {
        let gcn = init_params(&ModelSpec::new(ModelKind::Gcn, 2, 100), 50, 7, 0).unwrap();
        assert_eq!(gcn.count(), 50 * 100 + 100 + 100 * 100 + 100 + 100 * 7 + 7);
        assert_eq!(gcn.count(), 15907);
        let minus = init_params(&ModelSpec::new(ModelKind::GcnMinus, 2, 100), 50, 7, 0).unwrap();
        assert_eq!(minus.count(), 50 * 100 + 100 + 100 * 7 + 7);
        assert_eq!(minus.count(), 5807);
        assert_eq!(gcn.count() - minus.count(), 100 * 100 + 100);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let p = init_params(&ModelSpec::new(ModelKind::Gcn, 1, 30), 20, 4, 1).unwrap();
        let w = p.get("conv0.weight").unwrap();
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
        assert!(p.get("conv0.bias").unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_mlp_between_appnp_and_dgat() {
        let a = init_params(&ModelSpec::new(ModelKind::Appnp, 2, 6), 4, 3, 9).unwrap();
        let d = init_params(&ModelSpec::new(ModelKind::Dgat, 2, 6), 4, 3, 9).unwrap();
        for name in a.names() {
            assert_eq!(a.get(name), d.get(name), "{name}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!("dgat".parse::<ModelKind>().is_ok());
        assert!(matches!("GraphSAGE".parse::<ModelKind>(), Err(Error::Config(_))));
        let mut s = ModelSpec::new(ModelKind::Appnp, 2, 8);
        s.beta = 1.5;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(ModelKind::Gcn, 4, 8);
        assert!(s.validate().is_err());
        s.layers = 2;
        s.heads = 2;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(ModelKind::Sgc, 2, 8);
        s.linear_head = true;
        assert!(s.validate().is_err());
    }
}
