use serde::{Deserialize, Serialize};

use super::data::{assemble_batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{bce_with_logits, sigmoid};

/// Area under the ROC curve as the Mann–Whitney statistic: the share of
/// (positive, negative) pairs where the positive scores higher, ties
/// counting half.
///
/// Sorting and sweeping tie groups makes this `O(n log n)`; the pair counts
/// stay integral so the single final division is exact to rounding.
pub fn auc_score(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("AUC scores contain NaN".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Validation("AUC labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{pos} positive and {neg} negative sample(s)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut concordant, mut tied, mut neg_below) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        concordant += p * neg_below;
        tied += p * n;
        neg_below += n;
        i = j;
    }
    Ok((2 * concordant + tied) as f64 / (2 * pos * neg) as f64)
}

/// Inference-mode metrics over a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Share of samples where `score >= 0.5` agrees with the label.
    pub accuracy: f64,
    /// `None` when the set holds a single class.
    pub auc: Option<f64>,
    /// Mean binary cross-entropy.
    pub loss: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Evaluation {
    pub fn error_rate(&self) -> f64 {
        let wrong = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|(&s, &l)| u8::from(s >= 0.5) != l)
            .count();
        wrong as f64 / self.scores.len() as f64
    }

    pub fn auc(&self) -> Result<f64> {
        match self.auc {
            Some(a) => Ok(a),
            None => auc_score(&self.scores, &self.labels),
        }
    }

    fn from_logits(logits: &[f64], labels: Vec<u8>) -> Result<Self> {
        let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| u8::from(s >= 0.5) == l)
            .count();
        let n = labels.len();
        let auc = match auc_score(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        };
        // Loss over logits rather than scores keeps saturated outputs finite.
        let z = crate::tensor::Tensor::from_vec(&[n, 1], logits.to_vec())?;
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let (loss, _) = bce_with_logits(&z, &y)?;
        Ok(Evaluation {
            accuracy: correct as f64 / n as f64,
            auc,
            loss,
            scores,
            labels,
        })
    }
}

/// Runs `model` in inference mode over `data` in batches of `batch`.
pub fn evaluate(model: &Model<f32>, data: &dyn Dataset, batch: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let batch = batch.max(1);
    let mut logits = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch) {
        let (x, _) = assemble_batch(data, chunk)?;
        let z = model.predict(&x)?;
        logits.extend(z.data().iter().map(|&v| f64::from(v)));
    }
    let labels = indices.iter().map(|&i| data.label(i)).collect();
    Evaluation::from_logits(&logits, labels)
}
