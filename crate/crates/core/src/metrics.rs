//! Clip-level classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Zero when the denominator is zero.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], actual: &[usize], n_classes: usize) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= n_classes || a >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "class index out of range for {n_classes} classes"
                )));
            }
            confusion[a][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let predicted: u64 = (0..c).map(|i| confusion[i][k]).sum();
                let support: u64 = confusion[k].iter().sum();
                let precision = ratio(tp, predicted as f64);
                let recall = ratio(tp, support as f64);
                ClassMetrics {
                    precision,
                    recall,
                    f1: ratio(2.0 * precision * recall, precision + recall),
                    support,
                }
            })
            .collect();
        let macro_f1 = ratio(per_class.iter().map(|m| m.f1).sum(), c as f64);
        Ok(Self {
            accuracy: ratio(trace as f64, total as f64),
            macro_f1,
            per_class,
            confusion,
        })
    }
}

/// Most frequent predicted class per recording (ties go to the lower
/// class index).
pub fn majority_vote(
    recording_ids: &[String],
    predicted: &[usize],
    n_classes: usize,
) -> BTreeMap<String, usize> {
    let mut votes: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (id, &p) in recording_ids.iter().zip(predicted) {
        votes.entry(id.clone()).or_insert_with(|| vec![0; n_classes])[p] += 1;
    }
    votes
        .into_iter()
        .map(|(id, v)| {
            let best = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap_or(0);
            (id, best)
        })
        .collect()
}
