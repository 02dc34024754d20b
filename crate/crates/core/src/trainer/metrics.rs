use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;

/// Confusion-matrix summary. Rows of `confusion` are true classes and columns
/// predictions, both in `negative, neutral, positive` order. Per-class recall
/// and precision are `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: [[usize; 3]; 3],
    pub total: usize,
    pub accuracy: f64,
    /// Negative-class recall: how many negative subjects were recognised.
    pub sensitivity: Option<f64>,
    /// Mean recall over the neutral and positive classes present.
    pub specificity: Option<f64>,
    pub macro_f1: f64,
    pub recall: [Option<f64>; 3],
    pub precision: [Option<f64>; 3],
    pub f1: [Option<f64>; 3],
}

impl EvalReport {
    pub fn from_predictions(truth: &[ClassLabel], predicted: &[ClassLabel]) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let mut confusion = [[0usize; 3]; 3];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: [[usize; 3]; 3]) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let tp = |c: usize| confusion[c][c];
        let row = |c: usize| confusion[c].iter().sum::<usize>();
        let col = |c: usize| (0..3).map(|r| confusion[r][c]).sum::<usize>();
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);

        let recall: [Option<f64>; 3] = std::array::from_fn(|c| ratio(tp(c), row(c)));
        let precision: [Option<f64>; 3] = std::array::from_fn(|c| ratio(tp(c), col(c)));
        let f1: [Option<f64>; 3] = std::array::from_fn(|c| ratio(2 * tp(c), row(c) + col(c)));
        let present: Vec<f64> = f1.iter().flatten().copied().collect();
        let macro_f1 = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let accuracy = ratio((0..3).map(tp).sum(), total).unwrap_or(0.0);
        let others: Vec<f64> =
            [ClassLabel::Neutral, ClassLabel::Positive].iter().filter_map(|c| recall[c.index()]).collect();
        let specificity = (!others.is_empty()).then(|| others.iter().sum::<f64>() / others.len() as f64);
        EvalReport {
            confusion,
            total,
            accuracy,
            sensitivity: recall[ClassLabel::Negative.index()],
            specificity,
            macro_f1,
            recall,
            precision,
            f1,
        }
    }

    pub fn recall_of(&self, c: ClassLabel) -> Option<f64> {
        self.recall[c.index()]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
