//! Accuracy and regression metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean of per-class recalls over the classes present in the labels.
    pub ua: f64,
    /// Overall accuracy.
    pub wa: f64,
    pub mse_v: Option<f64>,
    pub mse_a: Option<f64>,
    pub mse_d: Option<f64>,
}

impl MetricsReport {
    pub fn mean_vad_mse(&self) -> Option<f64> {
        Some((self.mse_v? + self.mse_a? + self.mse_d?) / 3.0)
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], vad: Option<(&[[f64; 3]], &[[f64; 3]])>) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "need equal, non-empty prediction and label lists (got {} and {})",
            predictions.len(),
            labels.len()
        )));
    }
    let n_classes = labels.iter().chain(predictions).max().copied().unwrap_or(0) + 1;
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| totals[c] > 0).collect();
    let ua = present.iter().map(|&c| hits[c] as f64 / totals[c] as f64).sum::<f64>() / present.len() as f64;
    let wa = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    let (mut mse_v, mut mse_a, mut mse_d) = (None, None, None);
    if let Some((pred, truth)) = vad {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::input("V/A/D predictions and targets differ in length"));
        }
        let mse = |k: usize| pred.iter().zip(truth).map(|(p, t)| (p[k] - t[k]).powi(2)).sum::<f64>() / pred.len() as f64;
        mse_v = Some(mse(0));
        mse_a = Some(mse(1));
        mse_d = Some(mse(2));
    }
    Ok(MetricsReport {
        ua,
        wa,
        mse_v,
        mse_a,
        mse_d,
    })
}

/// Averages each group's segment logits and returns the argmax (first
/// maximum on ties) together with the mean vector.
pub fn utterance_vote(segment_logits: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let first = segment_logits
        .first()
        .ok_or_else(|| Error::input("utterance has no segments"))?;
    let mut mean = vec![0.0; first.len()];
    for l in segment_logits {
        for (m, v) in mean.iter_mut().zip(l) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= segment_logits.len() as f64);
    let mut best = 0;
    for (i, &v) in mean.iter().enumerate() {
        if v > mean[best] {
            best = i;
        }
    }
    Ok((best, mean))
}
