//! Evaluation quantities: overall/clean/spurious accuracy, attack success
//! rate, false confidence, feature-leakage mass ratio, and attribution-map
//! correlation.

use rayon::prelude::*;

use crate::attrib::{self, AttributionMap, HeadSpec};
use crate::data::{Dataset, SamplePair};
use crate::error::{RectError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub attack_success_rate: Option<f64>,
    pub false_confidence: Option<f64>,
    pub clean_set_accuracy: Option<f64>,
    pub spurious_set_accuracy: Option<f64>,
    pub spurious_gap: Option<f64>,
    pub leakage_ratio: Option<f64>,
    pub pcc: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "overall_accuracy,attack_success_rate,false_confidence,\
clean_set_accuracy,spurious_set_accuracy,spurious_gap,leakage_ratio,pcc";

impl MetricsReport {
    /// One CSV row in the fixed header order; absent metrics stay empty.
    pub fn to_csv_row(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.6}")).unwrap_or_default()
        }
        format!(
            "{:.6},{},{},{},{},{},{},{}",
            self.overall_accuracy,
            cell(self.attack_success_rate),
            cell(self.false_confidence),
            cell(self.clean_set_accuracy),
            cell(self.spurious_set_accuracy),
            cell(self.spurious_gap),
            cell(self.leakage_ratio),
            cell(self.pcc),
        )
    }
}

/// Fraction of dataset samples classified correctly.
pub fn overall_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    set_accuracy(model, &ds.images, &ds.labels)
}

/// Fraction of `images[i]` classified as `labels[i]`. An exact rational
/// count over the set.
pub fn set_accuracy(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(RectError::EmptyInput("set_accuracy on empty set".into()));
    }
    let predictions: Result<Vec<usize>> = images
        .par_iter()
        .map(|x| model.predict_class(x))
        .collect();
    let correct = predictions?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Fraction of triggered samples classified as the attack target. The set
/// must contain only trigger-bearing samples whose true label differs from
/// the target.
pub fn attack_success_rate(model: &Model, triggered: &[Tensor], target: usize) -> Result<f64> {
    if triggered.is_empty() {
        return Err(RectError::EmptyInput("attack_success_rate on empty set".into()));
    }
    let predictions: Result<Vec<usize>> = triggered
        .par_iter()
        .map(|x| model.predict_class(x))
        .collect();
    let hits = predictions?.iter().filter(|p| **p == target).count();
    Ok(hits as f64 / triggered.len() as f64)
}

/// Mean softmax probability assigned to the attack target over triggered
/// samples.
pub fn false_confidence(model: &Model, triggered: &[Tensor], target: usize) -> Result<f64> {
    if triggered.is_empty() {
        return Err(RectError::EmptyInput("false_confidence on empty set".into()));
    }
    let probs: Result<Vec<f64>> = triggered
        .par_iter()
        .map(|x| Ok(model.predict_probs(x)?[target]))
        .collect();
    let probs = probs?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Mean fraction of absolute input attribution that falls inside the null
/// block, with a black (all-zeros) baseline and the predicted-class logit as
/// the head. In [0, 1] by construction.
pub fn leakage_ratio(model: &Model, leakage_set: &[SamplePair], n_steps: usize) -> Result<f64> {
    if leakage_set.is_empty() {
        return Err(RectError::EmptyInput("leakage_ratio on empty set".into()));
    }
    let ratios: Result<Vec<f64>> = leakage_set
        .par_iter()
        .map(|pair| {
            if pair.region.data().iter().all(|v| *v == 0.0) {
                return Err(RectError::InvalidArgument(
                    "leakage sample is missing its null-block region mask".into(),
                ));
            }
            let predicted = model.predict_class(&pair.corrupted)?;
            let baseline = Tensor::zeros(pair.corrupted.shape().to_vec());
            let map = attrib::input_ig(
                model,
                &pair.corrupted,
                &baseline,
                HeadSpec::TargetLogit { class: predicted },
                n_steps,
            )?;
            let mut inside = 0.0;
            let mut total = 0.0;
            for (v, m) in map.values.data().iter().zip(pair.region.data()) {
                let a = v.abs();
                total += a;
                if *m > 0.0 {
                    inside += a;
                }
            }
            Ok(if total > 0.0 { inside / total } else { 0.0 })
        })
        .collect();
    let ratios = ratios?;
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Pearson correlation of two equally shaped attribution maps; 0 when either
/// map has zero variance.
pub fn pcc(map_a: &AttributionMap, map_b: &AttributionMap) -> Result<f64> {
    if map_a.values.shape() != map_b.values.shape() {
        return Err(RectError::ShapeMismatch {
            context: "pcc".into(),
            expected: map_a.values.shape().to_vec(),
            actual: map_b.values.shape().to_vec(),
        });
    }
    let a = map_a.values.data();
    let b = map_b.values.data();
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}
