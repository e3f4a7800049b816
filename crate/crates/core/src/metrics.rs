//! Confusion matrices and intersection-over-union.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("class {class} outside 0..{n_classes}")]
    OutOfRangeClass { class: u32, n_classes: usize },
    #[error("{predictions} predictions but {ground_truth} ground-truth labels")]
    LengthMismatch { predictions: usize, ground_truth: usize },
    #[error("no class is present in the confusion matrix")]
    NoEvaluableClass,
    #[error("matrices have {0} and {1} classes")]
    SizeMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Which classes enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Classes absent from both prediction and ground truth are skipped.
    #[default]
    Present,
    /// Absent classes count as IoU 0.
    AllClasses,
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|g| self.get(g, c)).sum()
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), n_classes * n_classes, "counts must be square");
        ConfusionMatrix { n_classes, counts }
    }

    /// Adds one count per pair whose ground truth is not `ignore`. The
    /// matrix is left untouched on error.
    pub fn accumulate(&mut self, predictions: &[u32], ground_truth: &[u32], ignore: u32) -> Result<()> {
        if predictions.len() != ground_truth.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: predictions.len(),
                ground_truth: ground_truth.len(),
            });
        }
        let n = self.n_classes;
        let check = |class: u32| {
            if class as usize >= n {
                Err(MetricsError::OutOfRangeClass { class, n_classes: n })
            } else {
                Ok(())
            }
        };
        for (&p, &g) in predictions.iter().zip(ground_truth) {
            if g != ignore {
                check(g)?;
                check(p)?;
            }
        }
        for (&p, &g) in predictions.iter().zip(ground_truth) {
            if g != ignore {
                self.counts[g as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(MetricsError::SizeMismatch(self.n_classes, other.n_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// IoU per class; `None` where the class appears in neither prediction nor
/// ground truth.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.n_classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let denom = cm.row_sum(c) + cm.col_sum(c) - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

pub fn miou_with(cm: &ConfusionMatrix, mode: MiouMode) -> Result<f64> {
    let ious = iou_per_class(cm);
    let values: Vec<f64> = match mode {
        MiouMode::Present => ious.into_iter().flatten().collect(),
        MiouMode::AllClasses if ious.iter().any(Option::is_some) => {
            ious.into_iter().map(|v| v.unwrap_or(0.0)).collect()
        }
        MiouMode::AllClasses => Vec::new(),
    };
    if values.is_empty() {
        return Err(MetricsError::NoEvaluableClass);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    miou_with(cm, MiouMode::Present)
}

fn class_name(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"))
}

/// Aligned text table of per-class IoU (percent) followed by the mean.
pub fn render_table(cm: &ConfusionMatrix, names: &[String], mode: MiouMode) -> String {
    let ious = iou_per_class(cm);
    let width = (0..cm.n_classes)
        .map(|c| class_name(names, c).len())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>10}", "class", "IoU", "points");
    for (c, iou) in ious.iter().enumerate() {
        let value = iou.map_or_else(|| "absent".to_string(), |v| format!("{:.2}", v * 100.0));
        let _ = writeln!(out, "{:<width$}  {value:>7}  {:>10}", class_name(names, c), cm.row_sum(c));
    }
    let mean = miou_with(cm, mode).map_or_else(|_| "n/a".to_string(), |v| format!("{:.2}", v * 100.0));
    let _ = writeln!(out, "{:<width$}  {mean:>7}  {:>10}", "mIoU", cm.total());
    out
}

/// `class_index,class_name,iou,tp,fp,fn` rows; absent classes leave `iou` empty.
pub fn render_csv(cm: &ConfusionMatrix, names: &[String]) -> String {
    let mut out = String::from("class_index,class_name,iou,tp,fp,fn\n");
    for (c, iou) in iou_per_class(cm).iter().enumerate() {
        let tp = cm.get(c, c);
        let _ = writeln!(
            out,
            "{c},{},{},{tp},{},{}",
            class_name(names, c),
            iou.map_or_else(String::new, |v| format!("{v:.6}")),
            cm.col_sum(c) - tp,
            cm.row_sum(c) - tp
        );
    }
    out
}
