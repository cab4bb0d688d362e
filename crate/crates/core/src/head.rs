//! Prediction head, losses, class-imbalance weights and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Default decision threshold on AU probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-AU loss weights, mean 1, inversely proportional to occurrence rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuWeights(pub Vec<f64>);

impl AuWeights {
    pub fn uniform(n: usize) -> Self {
        AuWeights(vec![1.0; n])
    }
}

/// `sigmoid(w . f + b)` for plain vectors.
pub fn au_probability(features: &[f64], weights: &[f64], bias: f64) -> Result<f64> {
    if features.len() != weights.len() {
        return Err(Error::structure(format!(
            "{} features against {} weights",
            features.len(),
            weights.len()
        )));
    }
    let z: f64 = features.iter().zip(weights).map(|(f, w)| f * w).sum::<f64>() + bias;
    Ok(1.0 / (1.0 + (-z).exp()))
}

/// Occurrence weights from a label matrix (rows are samples).
///
/// An AU that never occurs gets its rate floored at `1 / (2 N)`.
pub fn class_weights(labels: &[Vec<bool>]) -> Result<AuWeights> {
    let first = labels
        .first()
        .ok_or_else(|| Error::structure("class weights need at least one labelled sample"))?;
    let n = first.len();
    if labels.iter().any(|row| row.len() != n) {
        return Err(Error::structure("label rows have differing AU counts"));
    }
    let total = labels.len() as f64;
    let rates: Vec<f64> = (0..n)
        .map(|i| {
            let count = labels.iter().filter(|row| row[i]).count();
            if count == 0 {
                log::warn!("AU {} never occurs; flooring its rate at 1/(2N)", i + 1);
                1.0 / (2.0 * total)
            } else {
                count as f64 / total
            }
        })
        .collect();
    Ok(weights_from_rates(&rates))
}

/// Normalised inverse-rate weights for known positive rates.
pub fn weights_from_rates(rates: &[f64]) -> AuWeights {
    let inv: Vec<f64> = rates.iter().map(|r| 1.0 / r).collect();
    let sum: f64 = inv.iter().sum();
    let n = rates.len() as f64;
    AuWeights(inv.iter().map(|v| v / sum * n).collect())
}

/// Weighted binary cross entropy of `probs` (`[B, n]`), averaged over the batch.
pub fn detection_loss<S: Scalar>(g: &mut Graph<S>, probs: Var, targets: &[bool], weights: &AuWeights) -> Result<Var> {
    let t: Vec<S> = targets.iter().map(|&y| if y { S::one() } else { S::zero() }).collect();
    let w: Vec<S> = weights.0.iter().map(|&v| S::lit(v)).collect();
    g.weighted_bce(probs, &t, &w)
}

/// Detection loss plus every AU's CRF term.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, det: Var, crf_terms: &[Var]) -> Result<Var> {
    crf_terms.iter().try_fold(det, |acc, &t| g.add(acc, t))
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub probabilities: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP)`, 0 without predicted positives.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`, 0 without actual positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, written as `2TP / (2TP + FP + FN)`
    /// (the same value without the intermediate roundings). Defined as 0 when
    /// there are no positives at all.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    pub au: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    /// True when the AU had neither predicted nor actual positives.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub records: usize,
    pub per_au: Vec<AuMetrics>,
    pub avg_f1: f64,
    pub avg_accuracy: f64,
}

impl MetricsReport {
    pub fn from_confusions(confusions: &[Confusion], threshold: f64) -> Result<Self> {
        if confusions.is_empty() {
            return Err(Error::structure("metrics need at least one AU"));
        }
        let per_au: Vec<AuMetrics> = confusions
            .iter()
            .enumerate()
            .map(|(i, c)| AuMetrics {
                au: i + 1,
                f1: c.f1(),
                accuracy: c.accuracy(),
                precision: c.precision(),
                recall: c.recall(),
                confusion: *c,
                degenerate: c.tp + c.fp + c.fn_ == 0,
            })
            .collect();
        let n = per_au.len() as f64;
        Ok(MetricsReport {
            threshold,
            records: confusions[0].total() as usize,
            avg_f1: per_au.iter().map(|m| m.f1).sum::<f64>() / n,
            avg_accuracy: per_au.iter().map(|m| m.accuracy).sum::<f64>() / n,
            per_au,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Binarises at `threshold` (probability `>= threshold` is positive) and
/// tallies per-AU metrics.
pub fn evaluate_metrics(records: &[PredictionRecord], threshold: f64) -> Result<MetricsReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::structure("cannot evaluate an empty record set"))?;
    let n = first.labels.len();
    let mut confusions = vec![Confusion::default(); n];
    for r in records {
        if r.labels.len() != n || r.probabilities.len() != n {
            return Err(Error::structure("records disagree on the AU count"));
        }
        if r.probabilities.iter().any(|p| !p.is_finite()) {
            return Err(Error::structure("non-finite probability in prediction record"));
        }
        for (c, (&p, &y)) in confusions.iter_mut().zip(r.probabilities.iter().zip(&r.labels)) {
            c.add(p >= threshold, y);
        }
    }
    MetricsReport::from_confusions(&confusions, threshold)
}
