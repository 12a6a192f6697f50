//! Macro F1 and correlation-distance scoring.

use serde::{Deserialize, Serialize};

use crate::correlation::{correlation_matrix, LabelMatrix, PairMask, PredictionMatrix};
use crate::error::{Error, Result};
use crate::loss::masked_abs_diff;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    /// tp / (tp + ½(fp + fn)); 1 when the class is absent and never predicted.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        self.tp as f64 / (self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub corr_distance: f64,
    pub threshold: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "macro_f1,corr_distance,threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{}",
            self.macro_f1, self.corr_distance, self.threshold
        )
    }
}

/// Per-class confusion counts; a prediction is positive iff ŷ ≥ threshold.
pub fn confusion(y: &LabelMatrix, yhat: &PredictionMatrix, threshold: f64) -> Result<ConfusionCounts> {
    if y.values().dim() != yhat.values().dim() {
        return Err(Error::Shape(format!(
            "labels are {:?} but predictions are {:?}",
            y.values().dim(),
            yhat.values().dim()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let per_class = y
        .values()
        .columns()
        .into_iter()
        .zip(yhat.values().columns())
        .map(|(t, p)| {
            let mut c = ClassCounts::default();
            for (&t, &p) in t.iter().zip(p.iter()) {
                match (t == 1.0, p >= threshold) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            c
        })
        .collect();
    Ok(ConfusionCounts { per_class })
}

pub fn per_class_f1(counts: &ConfusionCounts) -> Vec<f64> {
    counts.per_class.iter().map(ClassCounts::f1).collect()
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(counts: &ConfusionCounts) -> f64 {
    let f = per_class_f1(counts);
    f.iter().sum::<f64>() / f.len() as f64
}

/// Σ over masked pairs valid in both matrices of |(p_y + 1) − (p_ŷ + 1)|,
/// not normalised by the pair count.
pub fn corr_distance(
    y: &LabelMatrix,
    yhat: &PredictionMatrix,
    mask: &PairMask,
    sigma_floor: f64,
) -> Result<f64> {
    if y.values().dim() != yhat.values().dim() {
        return Err(Error::Shape("labels and predictions differ in shape".into()));
    }
    if mask.dim() != y.n_classes() {
        return Err(Error::Shape("mask does not match the class count".into()));
    }
    let gt = correlation_matrix(y.view(), sigma_floor)?;
    let pred = correlation_matrix(yhat.view(), sigma_floor)?;
    Ok(masked_abs_diff(&gt, &pred, mask))
}

/// How `corr_distance` reads predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrInput {
    #[default]
    Probabilities,
    Thresholded,
}

/// Full report for one evaluation split.
pub fn evaluate(
    y: &LabelMatrix,
    yhat: &PredictionMatrix,
    mask: &PairMask,
    sigma_floor: f64,
    threshold: f64,
    corr_input: CorrInput,
) -> Result<MetricReport> {
    let counts = confusion(y, yhat, threshold)?;
    let per_class = per_class_f1(&counts);
    let macro_f1 = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let corr_distance = match corr_input {
        CorrInput::Probabilities => corr_distance(y, yhat, mask, sigma_floor)?,
        CorrInput::Thresholded => corr_distance(y, &yhat.thresholded(threshold), mask, sigma_floor)?,
    };
    Ok(MetricReport {
        macro_f1,
        per_class_f1: per_class,
        corr_distance,
        threshold,
    })
}
