//! Accuracy, multi-class MCC and macro precision/recall/F1 from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mcc: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Shape(format!("class {bad} outside 0..{classes}")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let n = labels.len() as f64;
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let actual: Vec<f64> = confusion.iter().map(|row| row.iter().sum::<usize>() as f64).collect();
    let predicted: Vec<f64> = (0..classes)
        .map(|k| confusion.iter().map(|row| row[k]).sum::<usize>() as f64)
        .collect();

    let c = correct as f64;
    let cov_pt = c * n - actual.iter().zip(&predicted).map(|(t, p)| t * p).sum::<f64>();
    let cov_pp = n * n - predicted.iter().map(|p| p * p).sum::<f64>();
    let cov_tt = n * n - actual.iter().map(|t| t * t).sum::<f64>();
    let mcc = ratio(cov_pt, (cov_pp * cov_tt).sqrt());

    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for k in 0..classes {
        let tp = confusion[k][k] as f64;
        let p = ratio(tp, predicted[k]);
        let r = ratio(tp, actual[k]);
        precision += p;
        recall += r;
        f1 += ratio(2.0 * p * r, p + r);
    }
    let k = classes.max(1) as f64;
    Ok(MetricsReport {
        accuracy: ratio(c, n),
        mcc,
        f1: f1 / k,
        recall: recall / k,
        precision: precision / k,
        confusion,
    })
}
