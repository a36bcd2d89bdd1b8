//! Open-set metrics and report files.
//!
//! Classes are zero-based; the last index of a confusion matrix is the
//! unknown class.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Square count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(pub Vec<Vec<usize>>);

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.0[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        self.0.iter().map(|r| r[j]).sum()
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let n = self.classes();
        let mut out = String::from("true\\pred");
        for j in 0..n {
            let _ = write!(out, ",{}", j + 1);
        }
        out.push('\n');
        for (i, row) in self.0.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(ConfusionMatrix(m))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// Fraction of true-unknown samples predicted unknown; 0 when there are
/// none.
pub fn u_recall(cm: &ConfusionMatrix) -> f64 {
    let u = cm.classes() - 1;
    ratio(cm.0[u][u], cm.row_sum(u))
}

/// Accuracy over true-known samples. Predicting unknown counts as an error.
pub fn known_acc(cm: &ConfusionMatrix) -> f64 {
    let k = cm.classes() - 1;
    let correct: usize = (0..k).map(|i| cm.0[i][i]).sum();
    let total: usize = (0..k).map(|i| cm.row_sum(i)).sum();
    ratio(correct, total)
}

/// Unweighted mean F1 over every class including the unknown one. Classes
/// with undefined precision or recall score 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let n = cm.classes();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = (0..n)
        .map(|i| {
            let tp = cm.0[i][i];
            let p = ratio(tp, cm.col_sum(i));
            let r = ratio(tp, cm.row_sum(i));
            if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }
        })
        .sum();
    sum / n as f64
}

/// Metrics of one diagnosis run. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub variant: String,
    pub speed: Option<u8>,
    pub seed: u64,
    pub config_hash: String,
    pub known_classes: usize,
    pub u_recall: f64,
    pub acc: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub test_count: usize,
    pub unknown_in_test: usize,
    pub pseudo_count: usize,
    pub reliable_count: usize,
    pub reliable_unknown: usize,
    pub fused_dim: usize,
    pub flags: Vec<String>,
}

pub const FLAG_NO_UNKNOWN: &str = "no_unknown_samples";
pub const FLAG_NO_KNOWN: &str = "no_known_samples";
pub const FLAG_EMPTY_RELIABLE: &str = "empty_reliable_subset";

/// Metric triple plus degenerate-case flags for a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> (f64, f64, f64, Vec<String>) {
    let mut flags = Vec::new();
    let u = cm.classes() - 1;
    if cm.row_sum(u) == 0 {
        flags.push(FLAG_NO_UNKNOWN.to_string());
    }
    if (0..u).all(|i| cm.row_sum(i) == 0) {
        flags.push(FLAG_NO_KNOWN.to_string());
    }
    (u_recall(cm), known_acc(cm), macro_f1(cm), flags)
}

impl DiagnosisReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `metric,speed,value` rows for plotting.
    pub fn long_rows(&self) -> Vec<(String, String, f64)> {
        let speed = self.speed.map_or(String::new(), |s| s.to_string());
        [("u_recall", self.u_recall), ("acc", self.acc), ("macro_f1", self.macro_f1)]
            .into_iter()
            .map(|(m, v)| (m.to_string(), speed.clone(), v))
            .collect()
    }
}

pub fn write_report(report: &DiagnosisReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<DiagnosisReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DiagnosisReport::from_json(&text)
}

/// Long-format CSV over several reports.
pub fn long_csv(reports: &[DiagnosisReport]) -> String {
    let mut out = String::from("variant,metric,speed,value\n");
    for r in reports {
        for (m, s, v) in r.long_rows() {
            let _ = writeln!(out, "{},{m},{s},{v}", r.variant);
        }
    }
    out
}
