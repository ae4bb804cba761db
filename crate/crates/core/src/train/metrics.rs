//! Classification metrics and run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub per_class_precision: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub param_count: usize,
}

impl FoldMetrics {
    /// Metrics from predictions. Classes that are never predicted count
    /// as precision 0 in the macro average.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize, param_count: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Config("empty test set".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::shape("metrics", "truth and prediction lengths differ"));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!(
                    "class index out of range for {classes} classes"
                )));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion, param_count))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>, param_count: usize) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_precision: Vec<f64> = (0..k)
            .map(|j| {
                let predicted: u64 = confusion.iter().map(|row| row[j]).sum();
                if predicted == 0 {
                    0.0
                } else {
                    confusion[j][j] as f64 / predicted as f64
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            macro_precision: per_class_precision.iter().sum::<f64>() / k.max(1) as f64,
            per_class_precision,
            confusion,
            param_count,
        }
    }

    pub fn confusion_csv(&self, class_names: &[&str]) -> String {
        let mut s = String::from("true\\predicted");
        for n in class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (row, name) in self.confusion.iter().zip(class_names) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: String,
    pub seed: u64,
    pub train_windows: usize,
    pub test_windows: usize,
    pub epoch_losses: Vec<f64>,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub split: String,
    pub gestures: String,
    pub config: serde_json::Value,
    pub folds: Vec<FoldReport>,
    pub accuracy: MeanStd,
    pub macro_precision: MeanStd,
}

impl RunReport {
    pub fn new(split: String, gestures: String, config: serde_json::Value, folds: Vec<FoldReport>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
        let prec: Vec<f64> = folds.iter().map(|f| f.metrics.macro_precision).collect();
        Self {
            split,
            gestures,
            config,
            accuracy: MeanStd::of(&acc),
            macro_precision: MeanStd::of(&prec),
            folds,
        }
    }
}
