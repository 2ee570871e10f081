use serde::{Deserialize, Serialize};

use crate::consensus::PseudoLabel;
use crate::error::{Error, Result};
use crate::store::{Class, Label};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: f64,
    /// mean recall over the classes present
    pub balanced_accuracy: f64,
    pub real: ClassCounts,
    pub fake: ClassCounts,
}

/// Accuracy figures of hard predictions against ground truth.
pub fn evaluate_predictions(predicted: &[Class], truth: &[Class]) -> Result<EvalMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: predicted.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut real, mut fake) = (ClassCounts::default(), ClassCounts::default());
    for (&p, &t) in predicted.iter().zip(truth) {
        let c = if t == Class::Real { &mut real } else { &mut fake };
        c.total += 1;
        c.correct += (p == t) as usize;
    }
    let recalls: Vec<f64> = [real, fake]
        .iter()
        .filter(|c| c.total > 0)
        .map(|c| c.correct as f64 / c.total as f64)
        .collect();
    Ok(EvalMetrics {
        n: truth.len(),
        accuracy: (real.correct + fake.correct) as f64 / truth.len() as f64,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        real,
        fake,
    })
}

/// Fake iff `y_hat > 0.5`.
pub fn decide(y_hat: f64) -> Class {
    if y_hat > 0.5 {
        Class::Fake
    } else {
        Class::Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    pub total: usize,
    pub accepted: usize,
    pub coverage: f64,
    pub accepted_real: usize,
    pub accepted_fake: usize,
    pub precision_real: Option<f64>,
    pub precision_fake: Option<f64>,
    pub recall_real: Option<f64>,
    pub recall_fake: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Coverage, precision and recall of pseudo-labels against masked ground
/// truth. Samples without ground truth count toward coverage only.
pub fn pseudo_label_quality(assignments: &[PseudoLabel], truth: &[Label]) -> Result<PseudoLabelQuality> {
    if assignments.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: assignments.len() });
    }
    let mut acc = [0usize; 2];
    let mut acc_known = [0usize; 2];
    let mut correct = [0usize; 2];
    let mut true_total = [0usize; 2];
    for (&a, &t) in assignments.iter().zip(truth) {
        if let Some(tc) = t.class() {
            true_total[tc as usize] += 1;
        }
        if let Some(ac) = a.class() {
            acc[ac as usize] += 1;
            if let Some(tc) = t.class() {
                acc_known[ac as usize] += 1;
                correct[ac as usize] += (ac == tc) as usize;
            }
        }
    }
    let (r, f) = (Class::Real as usize, Class::Fake as usize);
    let accepted = acc[r] + acc[f];
    Ok(PseudoLabelQuality {
        total: truth.len(),
        accepted,
        coverage: if truth.is_empty() { 0.0 } else { accepted as f64 / truth.len() as f64 },
        accepted_real: acc[r],
        accepted_fake: acc[f],
        precision_real: ratio(correct[r], acc_known[r]),
        precision_fake: ratio(correct[f], acc_known[f]),
        recall_real: ratio(correct[r], true_total[r]),
        recall_fake: ratio(correct[f], true_total[f]),
    })
}
