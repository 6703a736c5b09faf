//! Training objectives and the full-batch training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::accuracy;
use crate::graph::Graph;
use crate::models::{apply_head, forward, forward_on_tape, init_params, GraphInputs, ModelParams, ModelSpec};
use crate::tensor::{rng, DenseMatrix, Mode, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "VREX")]
    Vrex,
    #[serde(rename = "GROUPDRO")]
    GroupDro,
    #[serde(rename = "GRAPH_MIXUP")]
    GraphMixup,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Erm,
        Strategy::Irm,
        Strategy::Vrex,
        Strategy::GroupDro,
        Strategy::GraphMixup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Erm => "ERM",
            Strategy::Irm => "IRM",
            Strategy::Vrex => "VREX",
            Strategy::GroupDro => "GROUPDRO",
            Strategy::GraphMixup => "GRAPH_MIXUP",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

fn one() -> f64 {
    1.0
}

fn default_group_step() -> f64 {
    0.01
}

/// Optimisation settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Penalty weight for IRM and VREx.
    #[serde(default = "one")]
    pub lambda: f64,
    /// Exponentiated-gradient step for GroupDRO's environment weights.
    #[serde(default = "default_group_step")]
    pub group_step: f64,
    /// Beta(α, α) parameter for the mixing coefficient.
    #[serde(default = "one")]
    pub mixup_alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainPlan {
    pub fn new(strategy: Strategy, epochs: usize, lr: f64) -> Self {
        TrainPlan {
            strategy,
            epochs,
            lr,
            weight_decay: 0.0,
            lambda: 1.0,
            group_step: default_group_step(),
            mixup_alpha: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("penalty weight {} must be non-negative", self.lambda));
        }
        if !(self.group_step > 0.0) {
            return bad(format!("group step {} must be positive", self.group_step));
        }
        if !(self.mixup_alpha > 0.0) {
            return bad(format!("mixup alpha {} must be positive", self.mixup_alpha));
        }
        Ok(())
    }
}

/// Training nodes grouped by environment, ascending environment id. Empty
/// environments are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvBatch {
    pub envs: Vec<(usize, Vec<usize>)>,
}

impl EnvBatch {
    pub fn from_graph(g: &Graph) -> EnvBatch {
        Self::from_nodes(&g.splits().train, g.env_id())
    }

    pub fn from_nodes(train: &[usize], env_id: &[usize]) -> EnvBatch {
        let mut by_env: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &v in train {
            by_env.entry(env_id[v]).or_default().push(v);
        }
        EnvBatch {
            envs: by_env.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

fn labels_for(labels: &[usize], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| labels[r]).collect()
}

/// Mean cross-entropy over `train`. `labels` is indexed by node.
pub fn erm_loss(tape: &mut Tape, logits: Var, labels: &[usize], train: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, train, &labels_for(labels, train))
}

/// Per-environment risks, one scalar var each, in batch order.
pub fn env_risks(tape: &mut Tape, logits: Var, labels: &[usize], envs: &EnvBatch) -> Result<Vec<Var>> {
    envs.envs
        .iter()
        .map(|(_, rows)| erm_loss(tape, logits, labels, rows))
        .collect()
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = *vars
        .first()
        .ok_or_else(|| Error::Protocol("no training environments".into()))?;
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Sum over environments of the squared derivative of the environment risk
/// with respect to a scalar multiplier on the logits, taken at 1.
pub fn irm_penalty(tape: &mut Tape, logits: Var, labels: &[usize], envs: &EnvBatch) -> Result<Var> {
    let mut terms = Vec::with_capacity(envs.len());
    for (_, rows) in &envs.envs {
        let g = tape.irm_scale_grad(logits, rows, &labels_for(labels, rows))?;
        terms.push(tape.mul(g, g)?);
    }
    sum_vars(tape, &terms)
}

/// Population variance of the per-environment risks.
pub fn vrex_penalty(risks: &[f64]) -> Result<f64> {
    if risks.is_empty() {
        return Err(Error::Protocol("variance of zero environment risks".into()));
    }
    let n = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / n;
    Ok(risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n)
}

/// Differentiable form of [`vrex_penalty`].
pub fn vrex_penalty_on_tape(tape: &mut Tape, risks: &[Var]) -> Result<Var> {
    let n = risks.len() as f64;
    let total = sum_vars(tape, risks)?;
    let neg_mean = tape.scale(total, -1.0 / n)?;
    let mut sq = Vec::with_capacity(risks.len());
    for &r in risks {
        let d = tape.add(r, neg_mean)?;
        sq.push(tape.mul(d, d)?);
    }
    let s = sum_vars(tape, &sq)?;
    tape.scale(s, 1.0 / n)
}

/// Exponentiated-gradient update `q_e ← q_e·exp(η R_e)`, renormalised.
/// Returns the new weights and `Σ q'_e R_e`.
pub fn groupdro_step(risks: &[f64], weights: &[f64], step: f64) -> Result<(Vec<f64>, f64)> {
    if risks.len() != weights.len() || risks.is_empty() {
        return Err(Error::Protocol(format!(
            "{} risks for {} group weights",
            risks.len(),
            weights.len()
        )));
    }
    // Shifting by the largest exponent keeps the update finite.
    let top = risks
        .iter()
        .zip(weights)
        .filter(|(_, &q)| q > 0.0)
        .map(|(r, _)| step * r)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = risks
        .iter()
        .zip(weights)
        .map(|(r, q)| q * (step * r - top).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical("group weights collapsed".into()));
    }
    let q: Vec<f64> = raw.into_iter().map(|v| v / total).collect();
    let loss = q.iter().zip(risks).map(|(q, r)| q * r).sum();
    Ok((q, loss))
}

/// Convex mixing of train rows with a seeded partner permutation:
/// `h̃ᵢ = λhᵢ + (1−λ)h_{π(i)}`, and likewise for one-hot targets.
/// Returns the mixed rows in `train` order.
pub fn graph_mixup(
    hidden: &DenseMatrix,
    onehot: &DenseMatrix,
    train: &[usize],
    lambda: f64,
    pairing_seed: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if hidden.rows() != onehot.rows() {
        return Err(Error::shape("graph_mixup", hidden.shape(), onehot.shape()));
    }
    let partner = mixup_partners(train, pairing_seed);
    let mix = |m: &DenseMatrix| {
        let a = m.gather_rows(train);
        let b = m.gather_rows(&partner);
        a.zip_with(&b, "graph_mixup", |x, y| lambda * x + (1.0 - lambda) * y)
    };
    Ok((mix(hidden)?, mix(onehot)?))
}

/// Partner node for each train node: a seeded permutation of `train`.
pub fn mixup_partners(train: &[usize], seed: u64) -> Vec<usize> {
    let mut partner = train.to_vec();
    partner.shuffle(&mut rng::stream(seed, "mixup-pairing", 0));
    partner
}

fn one_hot(labels: &[usize], c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(labels.len(), c, |r, k| f64::from(u8::from(labels[r] == k)))
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .tensors()
            .iter()
            .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[DenseMatrix]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
                let gk = g[k] + self.weight_decay * *w;
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * gk;
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub iid_val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the best IID-validation accuracy.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

/// Per-run training state that persists across epochs.
struct Objective<'a> {
    plan: &'a TrainPlan,
    spec: &'a ModelSpec,
    labels: &'a [usize],
    train: &'a [usize],
    envs: EnvBatch,
    group_weights: Vec<f64>,
    classes: usize,
}

impl Objective<'_> {
    fn loss(&mut self, tape: &mut Tape, params: &ModelParams, vars: &[Var], logits: Var, rep: Var, epoch: usize) -> Result<Var> {
        let plan = self.plan;
        match plan.strategy {
            Strategy::Erm => erm_loss(tape, logits, self.labels, self.train),
            Strategy::Irm => {
                let erm = erm_loss(tape, logits, self.labels, self.train)?;
                let pen = irm_penalty(tape, logits, self.labels, &self.envs)?;
                let pen = tape.scale(pen, plan.lambda)?;
                tape.add(erm, pen)
            }
            Strategy::Vrex => {
                let erm = erm_loss(tape, logits, self.labels, self.train)?;
                let risks = env_risks(tape, logits, self.labels, &self.envs)?;
                let pen = vrex_penalty_on_tape(tape, &risks)?;
                let pen = tape.scale(pen, plan.lambda)?;
                tape.add(erm, pen)
            }
            Strategy::GroupDro => {
                let risks = env_risks(tape, logits, self.labels, &self.envs)?;
                let values: Vec<f64> = risks.iter().map(|&r| tape.scalar(r)).collect();
                let (q, _) = groupdro_step(&values, &self.group_weights, plan.group_step)?;
                let mut terms = Vec::with_capacity(risks.len());
                for (&r, &w) in risks.iter().zip(&q) {
                    terms.push(tape.scale(r, w)?);
                }
                self.group_weights = q;
                sum_vars(tape, &terms)
            }
            Strategy::GraphMixup => {
                let mut r = rng::stream(plan.seed, "mixup-lambda", epoch as u64);
                let beta = Beta::new(plan.mixup_alpha, plan.mixup_alpha)
                    .map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
                let lambda = beta.sample(&mut r);
                let partner = mixup_partners(self.train, rng::derive_seed(plan.seed, "mixup", epoch as u64));
                let a = tape.gather_rows(rep, self.train)?;
                let b = tape.gather_rows(rep, &partner)?;
                let a = tape.scale(a, lambda)?;
                let b = tape.scale(b, 1.0 - lambda)?;
                let mixed = tape.add(a, b)?;
                let out = apply_head(tape, self.spec, params, vars, mixed)?;
                let ya = one_hot(&labels_for(self.labels, self.train), self.classes);
                let yb = one_hot(&labels_for(self.labels, &partner), self.classes);
                let targets = ya.zip_with(&yb, "graph_mixup", |x, y| lambda * x + (1.0 - lambda) * y)?;
                tape.soft_cross_entropy(out, &targets)
            }
        }
    }
}

/// Eval-mode logits for every node.
pub fn predict(spec: &ModelSpec, params: &ModelParams, inputs: &GraphInputs) -> Result<DenseMatrix> {
    forward(spec, params, inputs, Mode::Eval, &mut rng::stream(0, "eval", 0))
}

/// Full-batch training from a fresh seeded initialisation.
pub fn train(spec: &ModelSpec, plan: &TrainPlan, g: &Graph) -> Result<TrainOutcome> {
    let params = init_params(spec, g.feature_dim(), g.classes(), plan.seed)?;
    train_from(spec, plan, g, params)
}

/// Full-batch training starting from `params`.
pub fn train_from(spec: &ModelSpec, plan: &TrainPlan, g: &Graph, mut params: ModelParams) -> Result<TrainOutcome> {
    spec.validate()?;
    plan.validate()?;
    if plan.strategy == Strategy::GraphMixup && !spec.has_head() {
        return Err(Error::Config(format!(
            "graph mixup mixes the input of a linear head; {} has none",
            spec.kind
        )));
    }
    let inputs = GraphInputs::from_graph(g);
    let splits = g.splits();
    let envs = EnvBatch::from_graph(g);
    let n_env = envs.len();
    let mut obj = Objective {
        plan,
        spec,
        labels: g.labels(),
        train: &splits.train,
        envs,
        group_weights: vec![1.0 / n_env as f64; n_env],
        classes: g.classes(),
    };
    let select_on: &[usize] = if splits.iid_val.is_empty() {
        &splits.train
    } else {
        &splits.iid_val
    };

    let mut adam = Adam::new(&params, plan.lr, plan.weight_decay);
    let mut trace = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..plan.epochs {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let mut drop_rng = rng::stream(plan.seed, "dropout", epoch as u64);
        let out = forward_on_tape(&mut tape, spec, &params, &vars, &inputs, Mode::Train, &mut drop_rng)?;
        let loss = obj.loss(&mut tape, &params, &vars, out.logits, out.representation, epoch)?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "{} loss became {loss_value} at epoch {epoch} (lr {})",
                plan.strategy, plan.lr
            )));
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<DenseMatrix> = vars.iter().map(|&v| grads.get(v)).collect::<Result<_>>()?;
        adam.step(&mut params, &grads);

        let logits = predict(spec, &params, &inputs)?;
        if !logits.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite logits after epoch {epoch} (lr {})",
                plan.lr
            )));
        }
        let train_acc = accuracy(&logits, g.labels(), &splits.train)?;
        let val_acc = accuracy(&logits, g.labels(), select_on)?;
        trace.push(EpochRecord {
            epoch,
            loss: loss_value,
            train_acc,
            iid_val_acc: val_acc,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_acc > *b) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vrex_examples() {
        assert_eq!(vrex_penalty(&[0.7, 0.7]).unwrap(), 0.0);
        assert_eq!(vrex_penalty(&[0.0, 2.0]).unwrap(), 1.0);
        let v = vrex_penalty(&[0.3, 0.5, 1.0]).unwrap();
        assert!((v - 0.0866666666666667).abs() < 1e-12);
        assert!(vrex_penalty(&[]).is_err());
    }

    #[test]
    fn groupdro_examples() {
        let (q, loss) = groupdro_step(&[0.4, 0.4], &[0.3, 0.7], 2.0).unwrap();
        assert!((q[0] - 0.3).abs() < 1e-15 && (q[1] - 0.7).abs() < 1e-15);
        assert!((loss - 0.4).abs() < 1e-15);
        let (q, _) = groupdro_step(&[1.0, 0.0], &[0.5, 0.5], 100.0).unwrap();
        assert!(q[0] > 1.0 - 1e-12 && q[1] < 1e-12);
        let (q, _) = groupdro_step(&[5.0], &[1.0], 0.3).unwrap();
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn mixup_identities() {
        let h = DenseMatrix::from_fn(6, 3, |r, c| (r * 3 + c) as f64);
        let y = one_hot(&[0, 1, 0, 1, 1, 0], 2);
        let train = [0, 2, 3, 5];
        let (mh, my) = graph_mixup(&h, &y, &train, 1.0, 7).unwrap();
        assert_eq!(mh, h.gather_rows(&train));
        assert_eq!(my, y.gather_rows(&train));
        let same = DenseMatrix::filled(6, 3, 2.5);
        let (mh, _) = graph_mixup(&same, &y, &train, 0.5, 7).unwrap();
        assert_eq!(mh, same.gather_rows(&train));
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::new(Strategy::Erm, 0, 0.01).validate().is_err());
        assert!(TrainPlan::new(Strategy::Erm, 1, 0.0).validate().is_err());
        let mut p = TrainPlan::new(Strategy::Irm, 1, 0.01);
        p.lambda = -1.0;
        assert!(p.validate().is_err());
        assert!("graph_mixup".parse::<Strategy>().is_ok());
        assert!("EERM".parse::<Strategy>().is_err());
    }
}
