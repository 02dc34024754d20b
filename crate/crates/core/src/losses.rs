//! Training objectives: three-way cross-entropy, borderline BCE and an
//! all-valid-triplets hinge, summed with configurable weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::model::Forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub triplet_weight: f64,
    pub ce_weight: f64,
    pub bce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.2, triplet_weight: 1.0, ce_weight: 1.0, bce_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("loss.margin must be > 0, got {}", self.margin)));
        }
        let w = [self.triplet_weight, self.ce_weight, self.bce_weight];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-sample targets of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLabels {
    pub class3: Vec<ClassLabel>,
    pub subject_id: Vec<String>,
}

impl BatchLabels {
    pub fn new(class3: Vec<ClassLabel>, subject_id: Vec<String>) -> Self {
        BatchLabels { class3, subject_id }
    }

    pub fn len(&self) -> usize {
        self.class3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class3.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.class3.iter().map(|c| c.index()).collect()
    }

    /// 1 for Neutral samples, 0 otherwise.
    pub fn borderline(&self) -> Vec<f64> {
        self.class3.iter().map(|c| f64::from(u8::from(c.is_borderline()))).collect()
    }
}

/// Batch-mean cross-entropy of `logits[N, 3]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[ClassLabel]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    tape.cross_entropy(logits, &idx)
}

/// Batch-mean binary cross-entropy on `logit[N, 1]`, computed from logits.
pub fn binary_cross_entropy(tape: &mut Tape, logit: Var, borderline: &[bool]) -> Result<Var> {
    let y: Vec<f64> = borderline.iter().map(|&b| f64::from(u8::from(b))).collect();
    tape.bce_with_logits(logit, &y)
}

/// Mean hinge `max(m + d(a, p) - d(a, n), 0)` over every valid triplet of rows
/// of `features[N, d]`. A batch without valid triplets contributes 0.
pub fn triplet_loss(tape: &mut Tape, features: Var, labels: &[ClassLabel], margin: f64) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let (loss, valid) = tape.triplet(features, &idx, margin)?;
    if valid == 0 {
        log::warn!("batch of {} samples has no valid triplet; triplet loss is 0", labels.len());
    }
    Ok(loss)
}

/// Loss handles plus plain values for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub total_value: f64,
    pub triplet: f64,
    pub ce: f64,
    /// Zero when the model has no borderline head.
    pub bce: f64,
}

/// Weighted sum of the triplet, cross-entropy and borderline BCE terms.
pub fn total_loss(tape: &mut Tape, out: &Forward, labels: &BatchLabels, cfg: &LossConfig) -> Result<LossBreakdown> {
    if labels.is_empty() {
        return Err(Error::arg("loss over an empty batch"));
    }
    let trip = triplet_loss(tape, out.metric_feature, &labels.class3, cfg.margin)?;
    let ce = cross_entropy(tape, out.logits3, &labels.class3)?;
    let mut terms = vec![(trip, cfg.triplet_weight), (ce, cfg.ce_weight)];
    let bce = match out.logits_borderline {
        Some(l) => {
            let flags: Vec<bool> = labels.class3.iter().map(|c| c.is_borderline()).collect();
            let b = binary_cross_entropy(tape, l, &flags)?;
            terms.push((b, cfg.bce_weight));
            Some(b)
        }
        None => None,
    };
    let total = weighted_sum(tape, &terms)?;
    Ok(LossBreakdown {
        total,
        total_value: tape.value(total).item(),
        triplet: tape.value(trip).item(),
        ce: tape.value(ce).item(),
        bce: bce.map_or(0.0, |b| tape.value(b).item()),
    })
}

pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let (&(first, w0), rest) = terms.split_first().ok_or_else(|| Error::arg("sum of no terms"))?;
    let mut acc = if w0 == 1.0 { first } else { tape.scale(first, w0) };
    for &(v, w) in rest {
        let term = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}
