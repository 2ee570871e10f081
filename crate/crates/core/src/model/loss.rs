use serde::{Deserialize, Serialize};

use crate::consensus::PseudoLabel;
use crate::error::{Error, Result};
use crate::store::Class;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy of one prediction against target `y` in {0, 1}.
pub(crate) fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Maps a cosine similarity onto (0, 1): `(1 + s) / 2`, clamped.
pub fn similarity_prob(s: f64) -> f64 {
    clamp_prob((1.0 + s) / 2.0)
}

fn check_batch(n: usize, m: usize) -> Result<()> {
    if n != m {
        return Err(Error::DimensionMismatch { expected: n, got: m });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean binary cross-entropy over a labeled batch (Fake is the positive class).
pub fn loss_supervised(y_hat: &[f64], labels: &[Class]) -> Result<f64> {
    check_batch(y_hat.len(), labels.len())?;
    let sum: f64 = y_hat.iter().zip(labels).map(|(&p, c)| bce(p, c.target())).sum();
    Ok(sum / y_hat.len() as f64)
}

/// Contrastive clustering loss on mapped similarities: real pairs are pulled
/// toward similarity 1, fake pairs pushed toward 0.
pub fn loss_contrastive_cluster(s_clip: &[f64], labels: &[Class]) -> Result<f64> {
    check_batch(s_clip.len(), labels.len())?;
    // bce(S, 1 - y) = -(y ln(1 - S) + (1 - y) ln S)
    let sum: f64 = s_clip
        .iter()
        .zip(labels)
        .map(|(&s, c)| bce(similarity_prob(s), 1.0 - c.target()))
        .sum();
    Ok(sum / s_clip.len() as f64)
}

/// Cross-entropy against pseudo-labels, averaged over accepted entries only.
/// Returns `(loss, accepted)`; the loss is 0 when nothing was accepted.
pub fn loss_unsupervised(y_hat: &[f64], pseudo: &[PseudoLabel]) -> Result<(f64, usize)> {
    if y_hat.len() != pseudo.len() {
        return Err(Error::DimensionMismatch { expected: y_hat.len(), got: pseudo.len() });
    }
    let (sum, accepted) = y_hat
        .iter()
        .zip(pseudo)
        .filter_map(|(&p, l)| l.class().map(|c| bce(p, c.target())))
        .fold((0.0, 0usize), |(s, n), l| (s + l, n + 1));
    Ok(if accepted == 0 { (0.0, 0) } else { (sum / accepted as f64, accepted) })
}

/// The three loss terms and their combination `l_sup + l_unsup + lambda * l_cc`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_cc: f64,
    pub l_unsup: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(l_sup: f64, l_cc: f64, l_unsup: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown { l_sup, l_cc, l_unsup, lambda, total: l_sup + l_unsup + lambda * l_cc }
}
