//! Speaker- and session-independent cross-validation plans.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::manifest::ManifestRecord;
use crate::nn::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvStrategy {
    LeaveOneSession,
    LeaveOneSpeaker,
}

impl CvStrategy {
    pub fn nominal_folds(self) -> usize {
        match self {
            CvStrategy::LeaveOneSession => 5,
            CvStrategy::LeaveOneSpeaker => 10,
        }
    }

    fn key(self, r: &ManifestRecord) -> &str {
        match self {
            CvStrategy::LeaveOneSession => &r.session_id,
            CvStrategy::LeaveOneSpeaker => &r.speaker_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out_key: String,
    /// Record indices held out for testing.
    pub test: Vec<usize>,
    pub train: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub strategy: CvStrategy,
    pub folds: Vec<Fold>,
}

/// One fold per distinct key, in sorted key order.
pub fn make_cv_plan(records: &[ManifestRecord], strategy: CvStrategy) -> Result<CvPlan> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(strategy.key(r)).or_default().push(i);
    }
    if groups.len() < 2 || groups.len() < strategy.nominal_folds() {
        return Err(Error::config(format!(
            "{strategy:?} needs {} distinct keys, found {}",
            strategy.nominal_folds(),
            groups.len()
        )));
    }
    let folds = groups
        .iter()
        .map(|(key, test)| Fold {
            held_out_key: key.to_string(),
            test: test.clone(),
            train: (0..records.len()).filter(|i| !test.contains(i)).collect(),
        })
        .collect();
    Ok(CvPlan { strategy, folds })
}

impl CvPlan {
    pub fn fold(&self, k: usize) -> Result<&Fold> {
        self.folds
            .get(k)
            .ok_or_else(|| Error::config(format!("fold {k} out of range (plan has {})", self.folds.len())))
    }
}

/// Splits `train` into (fit, validation) with `fraction` of every class going
/// to validation (at least one per class when the class has two or more).
pub fn validation_split(
    records: &[ManifestRecord],
    train: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, "validation-split");
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in train {
        by_class.entry(records[i].klass.index()).or_default().push(i);
    }
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let mut n_val = (idx.len() as f64 * fraction).round() as usize;
        if n_val == 0 && idx.len() >= 2 && fraction > 0.0 {
            n_val = 1;
        }
        val.extend_from_slice(&idx[..n_val]);
        fit.extend_from_slice(&idx[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}
