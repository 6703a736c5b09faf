//! Accuracy, the IID/OOD gap and the paired t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Fraction of `nodes` whose argmax logit equals the label. Ties go to the
/// lowest class index.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Protocol("accuracy over an empty node mask".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let mut hits = 0usize;
    for &v in nodes {
        if v >= logits.rows() {
            return Err(Error::Data(format!("node {v} outside 0..{}", logits.rows())));
        }
        if logits.argmax_row(v) == labels[v] {
            hits += 1;
        }
    }
    Ok(hits as f64 / nodes.len() as f64)
}

pub fn gap(iid_test: f64, ood_test: f64) -> f64 {
    iid_test - ood_test
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub t_value: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Two-tailed paired t-test on `a − b`.
///
/// Zero spread in the differences gives `t = 0, p = 1` when their mean is
/// zero and `t = ±f64::MAX, p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Protocol(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Protocol(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // Differences that agree to rounding count as zero spread.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(PairedTest {
            t_value: 0.0,
            p_value: 1.0,
            df,
        });
    }
    if var.sqrt() <= 1e-12 * scale {
        return Ok(PairedTest {
            t_value: mean.signum() * f64::MAX,
            p_value: 0.0,
            df,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(PairedTest {
        t_value: t,
        p_value: t_two_tailed_p(t, df as f64),
        df,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_tailed_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    reg_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Student's t cumulative distribution function.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * t_two_tailed_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz iteration.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    Better,
    Worse,
    NotSignificant,
}

pub fn significance_color(t: f64, p: f64) -> Significance {
    if p < 0.05 && t > 0.0 {
        Significance::Better
    } else if p < 0.05 && t < 0.0 {
        Significance::Worse
    } else {
        Significance::NotSignificant
    }
}

/// Accuracies of one trained model on the four evaluation splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub iid_val_acc: f64,
    pub ood_val_acc: f64,
    pub iid_test_acc: f64,
    pub ood_test_acc: f64,
}

impl RunResult {
    pub fn gap(&self) -> f64 {
        gap(self.iid_test_acc, self.ood_test_acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and n−1 sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

/// Per-seed results with their summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunResult>,
    pub iid_val: MeanStd,
    pub iid_test: MeanStd,
    pub ood_test: MeanStd,
    pub gap: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired: Option<PairedTest>,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunResult>) -> MetricsReport {
        let col = |f: fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let iid_val = MeanStd::of(&col(|r| r.iid_val_acc));
        let iid_test = MeanStd::of(&col(|r| r.iid_test_acc));
        let ood_test = MeanStd::of(&col(|r| r.ood_test_acc));
        let gap = MeanStd::of(&col(RunResult::gap));
        MetricsReport {
            runs,
            iid_val,
            iid_test,
            ood_test,
            gap,
            paired: None,
        }
    }

    pub fn ood_values(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.ood_test_acc).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }
}
