//! Classification metrics, paired significance tests and model size.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::special::student_t_two_sided;
use crate::tensor::Real;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(Self {
            n_classes: c,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.n_classes + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, j)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.n_classes)
            .map(|r| r.to_vec())
            .collect()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::invalid(format!(
                "label pair ({t}, {p}) outside [0, {n_classes})"
            )));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

/// A derived score that may have needed a fallback rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub warning: Option<String>,
}

impl Metric {
    fn clean(value: f64) -> Self {
        Self {
            value,
            warning: None,
        }
    }
}

/// Overall accuracy, trace / total. Zero for an empty matrix.
pub fn oa(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    cm.trace() as f64 / total as f64
}

/// Average accuracy as macro-averaged per-class recall. Classes without
/// any true samples are left out of the mean.
pub fn aa(cm: &ConfusionMatrix) -> Metric {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut empty = Vec::new();
    for i in 0..cm.n_classes() {
        let row = cm.row_sum(i);
        if row == 0 {
            empty.push(i);
            continue;
        }
        sum += cm.get(i, i) as f64 / row as f64;
        used += 1;
    }
    let value = if used == 0 { 0.0 } else { sum / used as f64 };
    Metric {
        value,
        warning: (!empty.is_empty()).then(|| format!("classes {empty:?} have no samples")),
    }
}

/// Mean of the one-vs-rest binary accuracies `(TP_i + TN_i) / total`.
/// Kept for audit next to the macro-recall [`aa`].
pub fn aa_literal(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total() as f64;
    let c = cm.n_classes();
    if total == 0.0 || c == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..c {
        let tp = cm.get(i, i) as f64;
        let fp = cm.col_sum(i) as f64 - tp;
        let fn_ = cm.row_sum(i) as f64 - tp;
        let tn = total - tp - fp - fn_;
        sum += (tp + tn) / total;
    }
    sum / c as f64
}

/// Cohen's kappa. Defined as 0 (with a warning) when chance agreement is 1.
pub fn kappa(cm: &ConfusionMatrix) -> Metric {
    let total = cm.total() as f64;
    if total == 0.0 {
        return Metric {
            value: 0.0,
            warning: Some("empty confusion matrix".into()),
        };
    }
    let p0 = oa(cm);
    let pe: f64 = (0..cm.n_classes())
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (total * total);
    if pe >= 1.0 {
        return Metric {
            value: 0.0,
            warning: Some("chance agreement is 1 (single class)".into()),
        };
    }
    Metric::clean((p0 - pe) / (1.0 - pe))
}

/// Per-class F1 `2TP / (2TP + FP + FN)`; `None` when the class never
/// appears in either truth or prediction.
pub fn class_f1(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let tp = cm.get(class, class) as f64;
    let fp = cm.col_sum(class) as f64 - tp;
    let fn_ = cm.row_sum(class) as f64 - tp;
    let denom = 2.0 * tp + fp + fn_;
    (denom > 0.0).then(|| 2.0 * tp / denom)
}

/// Macro-averaged F1 over classes that occur.
pub fn f1(cm: &ConfusionMatrix) -> Metric {
    let scores: Vec<f64> = (0..cm.n_classes()).filter_map(|i| class_f1(cm, i)).collect();
    let skipped = cm.n_classes() - scores.len();
    let value = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Metric {
        value,
        warning: (skipped > 0).then(|| format!("{skipped} classes absent from truth and prediction")),
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n: u64,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, config_hash: impl Into<String>, seed: u64) -> Self {
        let aa = aa(cm);
        let kappa = kappa(cm);
        let f1 = f1(cm);
        let per_class = (0..cm.n_classes())
            .map(|i| {
                let tp = cm.get(i, i) as f64;
                let col = cm.col_sum(i) as f64;
                let row = cm.row_sum(i);
                ClassMetrics {
                    precision: if col > 0.0 { tp / col } else { 0.0 },
                    recall: if row > 0 { tp / row as f64 } else { 0.0 },
                    f1: class_f1(cm, i).unwrap_or(0.0),
                    support: row,
                }
            })
            .collect();
        let warnings = [&aa.warning, &kappa.warning, &f1.warning]
            .into_iter()
            .flatten()
            .cloned()
            .collect();
        Self {
            oa: oa(cm),
            aa: aa.value,
            kappa: kappa.value,
            f1: f1.value,
            per_class,
            n: cm.total(),
            config_hash: config_hash.into(),
            seed,
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value; `None` when the differences have zero variance.
    pub p: Option<f64>,
    pub dof: usize,
}

impl TTest {
    pub fn is_degenerate(&self) -> bool {
        self.p.is_none()
    }
}

/// Paired-sample t-test on per-run metrics of two models.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired samples must have equal length"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(TTest { t, p: None, dof });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: Some(student_t_two_sided(t, dof as f64)),
        dof,
    })
}

/// Total number of trainable scalars.
pub fn param_count<T: Real>(params: &ParamSet<T>) -> usize {
    params.iter().map(|p| p.tensor.len()).sum()
}
