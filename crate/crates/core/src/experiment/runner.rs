use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, GridPoint};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, paired_t_test, significance_color, MetricsReport, RunResult, Significance};
use crate::graph::Graph;
use crate::models::{GraphInputs, ModelKind, ModelSpec};
use crate::strategies::{predict, train, TrainPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub nodes: usize,
    pub edges: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub envs: usize,
    pub train: usize,
    pub iid_val: usize,
    pub iid_test: usize,
    pub ood_val: usize,
    pub ood_test: usize,
}

impl DatasetSummary {
    fn of(g: &Graph) -> Self {
        let s = g.splits();
        DatasetSummary {
            nodes: g.num_nodes(),
            edges: g.adjacency().nnz() / 2,
            feature_dim: g.feature_dim(),
            classes: g.classes(),
            envs: g.envs(),
            train: s.train.len(),
            iid_val: s.iid_val.len(),
            iid_test: s.iid_test.len(),
            ood_val: s.ood_val.len(),
            ood_test: s.ood_test.len(),
        }
    }
}

/// A run that aborted on a numerical failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub index: usize,
    pub model: ModelSpec,
    pub train: TrainPlan,
    /// Absent when every seed failed.
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub model: String,
    pub baseline: String,
    pub t_value: f64,
    pub p_value: f64,
    pub df: usize,
    pub verdict: Significance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub points: Vec<PointReport>,
    /// Grid point with the highest mean IID-validation accuracy.
    pub selected: usize,
    /// The same selection restricted to each model kind.
    pub selected_by_kind: BTreeMap<ModelKind, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub significance: Vec<SignificanceEntry>,
}

impl ReportFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn selected_point(&self) -> &PointReport {
        &self.points[self.selected]
    }
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ReportFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: not a report: {e}", path.display())))
}

/// Index of the largest value, first wins on ties. `None` entries (points
/// with no successful run) are skipped. Only IID-validation means are
/// passed in, so OOD numbers cannot influence the choice.
pub fn select_point(iid_val_means: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in iid_val_means.iter().enumerate() {
        if let Some(m) = *m {
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((i, m));
            }
        }
    }
    best.map(|(i, _)| i)
}

enum RunOutcome {
    Done(RunResult),
    Failed(FailedRun),
}

fn run_one(g: &Graph, inputs: &GraphInputs, point: &GridPoint, seed: u64) -> Result<RunOutcome> {
    let plan = TrainPlan {
        seed,
        ..point.train.clone()
    };
    let trained = match train(&point.model, &plan, g) {
        Ok(t) => t,
        Err(Error::Numerical(msg)) => return Ok(RunOutcome::Failed(FailedRun { seed, error: msg })),
        Err(e) => return Err(e),
    };
    let logits = predict(&point.model, &trained.params, inputs)?;
    let s = g.splits();
    let acc = |nodes: &[usize]| accuracy(&logits, g.labels(), nodes);
    Ok(RunOutcome::Done(RunResult {
        seed,
        iid_val_acc: acc(&s.iid_val)?,
        ood_val_acc: acc(&s.ood_val)?,
        iid_test_acc: acc(&s.iid_test)?,
        ood_test_acc: acc(&s.ood_test)?,
    }))
}

fn check_dataset(g: &Graph) -> Result<()> {
    let s = g.splits();
    for (name, mask) in [("iid_val", &s.iid_val), ("ood_val", &s.ood_val)] {
        if mask.is_empty() {
            return Err(Error::Data(format!("experiments need a nonempty {name} split")));
        }
    }
    Ok(())
}

/// Trains every point on every seed. Results come back in (point, seed)
/// order regardless of scheduling.
fn run_points(g: &Graph, points: &[GridPoint], seeds: &[u64]) -> Result<Vec<PointReport>> {
    let inputs = GraphInputs::from_graph(g);
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let outcomes: Vec<Result<RunOutcome>> = jobs
        .par_iter()
        .map(|&(p, s)| run_one(g, &inputs, &points[p], s))
        .collect();
    let mut reports: Vec<PointReport> = points
        .iter()
        .enumerate()
        .map(|(index, p)| PointReport {
            index,
            model: p.model.clone(),
            train: p.train.clone(),
            metrics: None,
            failed: Vec::new(),
        })
        .collect();
    let mut runs: Vec<Vec<RunResult>> = vec![Vec::new(); points.len()];
    for (&(p, _), outcome) in jobs.iter().zip(outcomes) {
        match outcome? {
            RunOutcome::Done(r) => runs[p].push(r),
            RunOutcome::Failed(f) => reports[p].failed.push(f),
        }
    }
    for (report, runs) in reports.iter_mut().zip(runs) {
        if !runs.is_empty() {
            report.metrics = Some(MetricsReport::from_runs(runs));
        }
    }
    Ok(reports)
}

fn pair_on_common_seeds(a: &MetricsReport, b: &MetricsReport) -> (Vec<f64>, Vec<f64>) {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for r in &a.runs {
        if let Some(o) = b.runs.iter().find(|o| o.seed == r.seed) {
            xa.push(r.ood_test_acc);
            xb.push(o.ood_test_acc);
        }
    }
    (xa, xb)
}

fn entry(model: String, baseline: String, a: &[f64], b: &[f64]) -> Result<SignificanceEntry> {
    let t = paired_t_test(a, b)?;
    Ok(SignificanceEntry {
        model,
        baseline,
        t_value: t.t_value,
        p_value: t.p_value,
        df: t.df,
        verdict: significance_color(t.t_value, t.p_value),
    })
}

fn iid_means(points: &[PointReport]) -> Vec<Option<f64>> {
    points
        .iter()
        .map(|p| p.metrics.as_ref().map(|m| m.iid_val.mean))
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportFile> {
    config.validate()?;
    let g = config.dataset.load()?;
    check_dataset(&g)?;
    let grid = config.grid()?;
    let mut points = run_points(&g, &grid, &config.seeds)?;

    let selected = select_point(&iid_means(&points))
        .ok_or_else(|| Error::Numerical("every run of every grid point aborted".into()))?;
    let mut selected_by_kind = BTreeMap::new();
    for kind in &config.models.kind {
        let masked: Vec<Option<f64>> = points
            .iter()
            .map(|p| {
                if p.model.kind == *kind {
                    p.metrics.as_ref().map(|m| m.iid_val.mean)
                } else {
                    None
                }
            })
            .collect();
        if let Some(i) = select_point(&masked) {
            selected_by_kind.insert(*kind, i);
        }
    }

    let mut significance = Vec::new();
    if let Some(base) = config.baseline {
        let Some(&bi) = selected_by_kind.get(&base) else {
            return Err(Error::Config(format!("baseline {base} is not in the model grid")));
        };
        for (&kind, &i) in &selected_by_kind {
            if kind == base {
                continue;
            }
            let (a, b) = {
                let ma = points[i].metrics.as_ref().expect("selected points have runs");
                let mb = points[bi].metrics.as_ref().expect("selected points have runs");
                pair_on_common_seeds(ma, mb)
            };
            if a.len() < 2 {
                continue;
            }
            let e = entry(kind.to_string(), base.to_string(), &a, &b)?;
            if let Some(m) = points[i].metrics.as_mut() {
                m.paired = Some(crate::evaluation::PairedTest {
                    t_value: e.t_value,
                    p_value: e.p_value,
                    df: e.df,
                });
            }
            significance.push(e);
        }
    }

    let report = ReportFile {
        config: config.clone(),
        dataset: DatasetSummary::of(&g),
        points,
        selected,
        selected_by_kind,
        significance,
    };
    if let Some(out) = &config.output {
        std::fs::write(out, report.to_json()).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    }
    Ok(report)
}

/// Runs on a dedicated pool of `threads` workers (all cores when `None`).
/// Results do not depend on the thread count.
pub fn run_experiment_with_threads(config: &ExperimentConfig, threads: Option<usize>) -> Result<ReportFile> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

/// Paired t-test of the selected points' per-seed OOD test accuracy.
pub fn compare_models(a: &ReportFile, b: &ReportFile) -> Result<SignificanceEntry> {
    let pa = a.selected_point();
    let pb = b.selected_point();
    let (Some(ma), Some(mb)) = (&pa.metrics, &pb.metrics) else {
        return Err(Error::Protocol("selected point has no completed runs".into()));
    };
    if ma.seeds() != mb.seeds() {
        return Err(Error::Protocol(format!(
            "reports were run on different seeds: {:?} vs {:?}",
            ma.seeds(),
            mb.seeds()
        )));
    }
    entry(
        pa.model.kind.to_string(),
        pb.model.kind.to_string(),
        &ma.ood_values(),
        &mb.ood_values(),
    )
}

pub const ABLATION_VARIANTS: [&str; 4] = [
    "DGat",
    "w/o self-attention",
    "w/o decouple",
    "w/o remove linear classifier",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub model: ModelSpec,
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub train: TrainPlan,
    pub rows: Vec<AblationRow>,
}

/// Picks the best DGAT point of the config's grid by IID validation, then
/// trains the three ablated variants with the same hyperparameters.
pub fn ablation_suite(config: &ExperimentConfig) -> Result<AblationTable> {
    if !config.models.kind.contains(&ModelKind::Dgat) {
        return Err(Error::Config("ablations need DGAT in the model grid".into()));
    }
    let mut base_cfg = config.clone();
    base_cfg.models.kind = vec![ModelKind::Dgat];
    base_cfg.baseline = None;
    base_cfg.output = None;
    base_cfg.validate()?;
    let g = base_cfg.dataset.load()?;
    check_dataset(&g)?;
    let grid = base_cfg.grid()?;
    let searched = run_points(&g, &grid, &config.seeds)?;
    let best = select_point(&iid_means(&searched))
        .ok_or_else(|| Error::Numerical("every DGAT run aborted".into()))?;
    let full = &searched[best];

    let spec = full.model.clone();
    let no_attention = ModelSpec {
        gamma: 1.0,
        ..spec.clone()
    };
    let coupled = ModelSpec {
        kind: ModelKind::Gat,
        beta: 0.0,
        gamma: 0.0,
        prop_steps: None,
        linear_head: false,
        ..spec.clone()
    };
    let with_head = ModelSpec {
        linear_head: true,
        ..spec.clone()
    };
    let variants: Vec<GridPoint> = [no_attention, coupled, with_head]
        .into_iter()
        .map(|model| GridPoint {
            model,
            train: full.train.clone(),
        })
        .collect();
    let others = run_points(&g, &variants, &config.seeds)?;

    let mut rows = vec![AblationRow {
        variant: ABLATION_VARIANTS[0].into(),
        model: spec,
        metrics: full.metrics.clone(),
        failed: full.failed.clone(),
    }];
    for (name, p) in ABLATION_VARIANTS[1..].iter().zip(others) {
        rows.push(AblationRow {
            variant: (*name).into(),
            model: p.model,
            metrics: p.metrics,
            failed: p.failed,
        });
    }
    Ok(AblationTable {
        train: full.train.clone(),
        rows,
    })
}

fn pct(m: f64, s: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
}

fn describe(spec: &ModelSpec) -> String {
    let mut s = format!("{} L={} d={}", spec.kind, spec.layers, spec.hidden);
    if matches!(spec.kind, ModelKind::Gat | ModelKind::Dgat) {
        write!(s, " heads={}", spec.heads).unwrap();
    }
    if matches!(spec.kind, ModelKind::Appnp | ModelKind::Dgat) {
        write!(s, " β={}", spec.beta).unwrap();
    }
    if spec.kind == ModelKind::Dgat {
        write!(s, " γ={}", spec.gamma).unwrap();
    }
    if spec.linear_head && spec.kind == ModelKind::Dgat {
        s.push_str(" +head");
    }
    write!(s, " drop={}", spec.dropout).unwrap();
    s
}

/// Human-readable table: one row per grid point, accuracies in percent.
pub fn render_report(r: &ReportFile) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<4} {:<52} {:<10} {:>7} {:>16} {:>16} {:>16}",
        "#", "model", "strategy", "lr", "IID val", "OOD test", "GAP"
    )
    .unwrap();
    for p in &r.points {
        let mark = if p.index == r.selected { "*" } else { " " };
        let cells = match &p.metrics {
            Some(m) => format!(
                "{:>16} {:>16} {:>16}",
                pct(m.iid_val.mean, m.iid_val.std),
                pct(m.ood_test.mean, m.ood_test.std),
                pct(m.gap.mean, m.gap.std)
            ),
            None => format!("{:>16} {:>16} {:>16}", "failed", "-", "-"),
        };
        writeln!(
            out,
            "{mark}{:<3} {:<52} {:<10} {:>7} {cells}",
            p.index,
            describe(&p.model),
            p.train.strategy.name(),
            p.train.lr
        )
        .unwrap();
        if !p.failed.is_empty() {
            writeln!(out, "     {} run(s) aborted", p.failed.len()).unwrap();
        }
    }
    for e in &r.significance {
        writeln!(
            out,
            "{} vs {}: t = {:.4}, p = {:.4} ({:?})",
            e.model, e.baseline, e.t_value, e.p_value, e.verdict
        )
        .unwrap();
    }
    out
}

pub fn render_ablation(t: &AblationTable) -> String {
    let mut out = String::new();
    writeln!(out, "{:<30} {:>16} {:>16}", "variant", "OOD", "GAP").unwrap();
    for row in &t.rows {
        match &row.metrics {
            Some(m) => writeln!(
                out,
                "{:<30} {:>16} {:>16}",
                row.variant,
                pct(m.ood_test.mean, m.ood_test.std),
                pct(m.gap.mean, m.gap.std)
            ),
            None => writeln!(out, "{:<30} {:>16} {:>16}", row.variant, "failed", "-"),
        }
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_ignores_missing_and_prefers_first() {
        assert_eq!(select_point(&[Some(0.5), Some(0.7), Some(0.7)]), Some(1));
        assert_eq!(select_point(&[None, Some(0.1)]), Some(1));
        assert_eq!(select_point(&[None, None]), None);
    }
}
