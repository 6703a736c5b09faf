//! Configuration-driven experiments: grid expansion, multi-seed runs,
//! IID-validation model selection, significance testing and ablations.

mod runner;

pub use runner::{
    ablation_suite, compare_models, load_report, render_ablation, render_report, run_experiment,
    run_experiment_with_threads, select_point, AblationRow, AblationTable, DatasetSummary, FailedRun, PointReport,
    ReportFile, SignificanceEntry, ABLATION_VARIANTS,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gen_concept_shift, gen_covariate_shift, load_graph, GeneratorConfig, Graph};
use crate::models::{ModelKind, ModelSpec};
use crate::strategies::{Strategy, TrainPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Covariate,
    Concept,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariate" => Ok(ShiftKind::Covariate),
            "concept" => Ok(ShiftKind::Concept),
            _ => Err(Error::Usage(format!("unknown shift kind {s:?}; use covariate or concept"))),
        }
    }
}

fn default_corr_train() -> f64 {
    0.9
}

fn default_corr_ood() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: ShiftKind,
    #[serde(default)]
    pub config: GeneratorConfig,
    #[serde(default = "default_corr_train")]
    pub corr_train: f64,
    #[serde(default = "default_corr_ood")]
    pub corr_ood: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Graph> {
        match self.kind {
            ShiftKind::Covariate => gen_covariate_shift(&self.config, self.seed),
            ShiftKind::Concept => gen_concept_shift(&self.config, self.corr_train, self.corr_ood, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    File(PathBuf),
    Generator(GeneratorSpec),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Graph> {
        match self {
            DatasetSource::File(p) => load_graph(p),
            DatasetSource::Generator(g) => g.generate(),
        }
    }
}

fn v<T>(x: T) -> Vec<T> {
    vec![x]
}

/// Model hyperparameter grid. Each field lists candidate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGrid {
    pub kind: Vec<ModelKind>,
    pub layers: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Only varied for attention models.
    #[serde(default = "default_heads")]
    pub heads: Vec<usize>,
    /// Only varied for APPNP and DGAT.
    #[serde(default = "zero_list")]
    pub beta: Vec<f64>,
    /// Only varied for DGAT.
    #[serde(default = "zero_list")]
    pub gamma: Vec<f64>,
    #[serde(default = "zero_list")]
    pub dropout: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prop_steps: Option<usize>,
}

fn default_heads() -> Vec<usize> {
    v(1)
}

fn zero_list() -> Vec<f64> {
    v(0.0)
}

fn default_strategies() -> Vec<Strategy> {
    v(Strategy::Erm)
}

fn one_list() -> Vec<f64> {
    v(1.0)
}

fn group_step_list() -> Vec<f64> {
    v(0.01)
}

/// Training hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGrid {
    #[serde(default = "default_strategies")]
    pub strategy: Vec<Strategy>,
    pub lr: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default = "zero_list")]
    pub weight_decay: Vec<f64>,
    #[serde(default = "one_list")]
    pub lambda: Vec<f64>,
    #[serde(default = "group_step_list")]
    pub group_step: Vec<f64>,
    #[serde(default = "one_list")]
    pub mixup_alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSource,
    pub models: ModelGrid,
    pub train: TrainGrid,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Model kind every other kind is tested against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ModelKind>,
    /// Restrict every grid value to the published search space.
    #[serde(default)]
    pub paper_grid: bool,
}

/// One hyperparameter combination; the plan's seed is replaced per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub model: ModelSpec,
    pub train: TrainPlan,
}

/// Published search space, as the union of the two lists given for the
/// investigation and the model comparison.
pub mod paper_grid {
    pub const LR: [f64; 3] = [1e-3, 5e-3, 5e-2];
    pub const DROPOUT: [f64; 4] = [0.0, 0.1, 0.2, 0.5];
    pub const HIDDEN: [usize; 3] = [100, 200, 300];
    pub const LAYERS: [usize; 3] = [1, 2, 3];
    pub const GAMMA: [f64; 3] = [0.0, 0.2, 0.5];
    pub const BETA: [f64; 4] = [0.0, 0.1, 0.2, 0.5];
    pub const HEADS: [usize; 2] = [2, 4];
}

fn outside<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T], allowed: &[T]) -> Result<()> {
    match values.iter().find(|x| !allowed.contains(x)) {
        Some(x) => Err(Error::Config(format!(
            "{name} value {x:?} is outside the paper grid {allowed:?}"
        ))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.models;
        let t = &self.train;
        let lists: [(&str, usize); 14] = [
            ("models.kind", m.kind.len()),
            ("models.layers", m.layers.len()),
            ("models.hidden", m.hidden.len()),
            ("models.heads", m.heads.len()),
            ("models.beta", m.beta.len()),
            ("models.gamma", m.gamma.len()),
            ("models.dropout", m.dropout.len()),
            ("train.strategy", t.strategy.len()),
            ("train.lr", t.lr.len()),
            ("train.epochs", t.epochs.len()),
            ("train.weight_decay", t.weight_decay.len()),
            ("train.lambda", t.lambda.len()),
            ("train.group_step", t.group_step.len()),
            ("train.mixup_alpha", t.mixup_alpha.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("grid list {name} is empty")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {s} listed twice")));
        }
        if self.paper_grid {
            outside("lr", &t.lr, &paper_grid::LR)?;
            outside("dropout", &m.dropout, &paper_grid::DROPOUT)?;
            outside("hidden", &m.hidden, &paper_grid::HIDDEN)?;
            outside("layers", &m.layers, &paper_grid::LAYERS)?;
            outside("gamma", &m.gamma, &paper_grid::GAMMA)?;
            outside("beta", &m.beta, &paper_grid::BETA)?;
            if m.kind.iter().any(|k| matches!(k, ModelKind::Gat | ModelKind::Dgat)) {
                outside("heads", &m.heads, &paper_grid::HEADS)?;
            }
        }
        for p in self.grid()? {
            p.model.validate()?;
            p.train.validate()?;
        }
        Ok(())
    }

    /// Expands the grids in declaration order, kind outermost. Values that
    /// a kind ignores are pinned so no duplicate points appear, and graph
    /// mixup is only paired with models that have a linear head.
    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        let m = &self.models;
        let t = &self.train;
        let mut models = Vec::new();
        for &kind in &m.kind {
            let attention = matches!(kind, ModelKind::Gat | ModelKind::Dgat);
            let teleport = matches!(kind, ModelKind::Appnp | ModelKind::Dgat);
            let heads: &[usize] = if attention { &m.heads } else { &[1] };
            let betas: &[f64] = if teleport { &m.beta } else { &[0.0] };
            let gammas: &[f64] = if kind == ModelKind::Dgat { &m.gamma } else { &[0.0] };
            for &layers in &m.layers {
                for &hidden in &m.hidden {
                    for &h in heads {
                        for &beta in betas {
                            for &gamma in gammas {
                                for &dropout in &m.dropout {
                                    let spec = ModelSpec {
                                        heads: h,
                                        beta,
                                        gamma,
                                        dropout,
                                        prop_steps: m.prop_steps,
                                        ..ModelSpec::new(kind, layers, hidden)
                                    };
                                    if !models.contains(&spec) {
                                        models.push(spec);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut plans = Vec::new();
        for &strategy in &t.strategy {
            let lambdas: &[f64] = if matches!(strategy, Strategy::Irm | Strategy::Vrex) { &t.lambda } else { &[1.0] };
            let steps: &[f64] = if strategy == Strategy::GroupDro { &t.group_step } else { &[0.01] };
            let alphas: &[f64] = if strategy == Strategy::GraphMixup { &t.mixup_alpha } else { &[1.0] };
            for &lr in &t.lr {
                for &epochs in &t.epochs {
                    for &weight_decay in &t.weight_decay {
                        for &lambda in lambdas {
                            for &group_step in steps {
                                for &mixup_alpha in alphas {
                                    let plan = TrainPlan {
                                        strategy,
                                        epochs,
                                        lr,
                                        weight_decay,
                                        lambda,
                                        group_step,
                                        mixup_alpha,
                                        seed: 0,
                                    };
                                    if !plans.contains(&plan) {
                                        plans.push(plan);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut points = Vec::new();
        for model in &models {
            for plan in &plans {
                if plan.strategy == Strategy::GraphMixup && !model.has_head() {
                    continue;
                }
                points.push(GridPoint {
                    model: model.clone(),
                    train: plan.clone(),
                });
            }
        }
        if points.is_empty() {
            return Err(Error::Config(
                "the grid is empty: graph mixup needs a model with a linear head".into(),
            ));
        }
        Ok(points)
    }
}

/// Hyperparameters reported for the benchmark datasets. Shipped for
/// reference only; those datasets are not part of this crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub dataset: &'static str,
    pub model: &'static str,
    pub lr: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: Option<usize>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

const fn gcn(dataset: &'static str, lr: f64, dropout: f64, hidden: usize, layers: usize) -> Preset {
    Preset {
        dataset,
        model: "GCN",
        lr,
        dropout,
        hidden,
        layers,
        heads: None,
        beta: None,
        gamma: None,
    }
}

pub const PRESETS: [Preset; 15] = [
    gcn("GOODCora-degree-covariate", 1e-3, 0.5, 200, 2),
    gcn("GOODCora-degree-concept", 1e-3, 0.5, 200, 2),
    gcn("GOODCora-word-covariate", 1e-3, 0.5, 300, 2),
    gcn("GOODCora-word-concept", 1e-3, 0.5, 300, 1),
    gcn("GOODArxiv-degree-covariate", 1e-3, 0.2, 300, 3),
    gcn("GOODArxiv-degree-concept", 1e-3, 0.2, 300, 3),
    gcn("GOODArxiv-time-covariate", 1e-3, 0.2, 300, 3),
    gcn("GOODArxiv-time-concept", 1e-3, 0.2, 300, 3),
    gcn("GOODTwitch-language-covariate", 1e-3, 0.5, 200, 2),
    gcn("GOODTwitch-language-concept", 1e-3, 0.5, 300, 3),
    gcn("GOODWebKB-university-concept", 5e-3, 0.5, 300, 1),
    gcn("GOODCora-degree-concept (comparison)", 5e-3, 0.2, 300, 2),
    Preset {
        model: "GAT",
        heads: Some(2),
        ..gcn("GOODCora-degree-concept (comparison)", 5e-3, 0.2, 300, 2)
    },
    Preset {
        model: "APPNP",
        beta: Some(0.2),
        ..gcn("GOODCora-degree-concept (comparison)", 5e-3, 0.2, 300, 2)
    },
    Preset {
        model: "DGAT",
        heads: Some(2),
        beta: Some(0.2),
        gamma: Some(0.5),
        ..gcn("GOODCora-degree-concept (comparison)", 5e-3, 0.2, 300, 2)
    },
];
