//! Confidence-thresholding pseudo-label policies used as comparison methods,
//! all operating on the head's predicted probability of Fake.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::PseudoLabel;
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// consensus pseudo-labels
    #[default]
    Covlm,
    /// labeled data only
    SupOnly,
    /// fixed confidence threshold
    Fixmatch,
    /// global self-adjusting threshold
    FreematchStar,
    /// class-dependent thresholds
    Adsh,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Covlm => "covlm",
            PolicyKind::SupOnly => "sup_only",
            PolicyKind::Fixmatch => "fixmatch",
            PolicyKind::FreematchStar => "freematch_star",
            PolicyKind::Adsh => "adsh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub kind: PolicyKind,
    #[serde(default = "PolicyConfig::default_tau")]
    pub fixed_tau: f64,
    #[serde(default = "PolicyConfig::default_decay")]
    pub ema_decay: f64,
    /// (real, fake) proportion targeted by adsh; defaults to the labeled split's.
    #[serde(default)]
    pub target_class_ratio: Option<(u32, u32)>,
}

impl PolicyConfig {
    fn default_tau() -> f64 {
        0.95
    }
    fn default_decay() -> f64 {
        0.999
    }

    pub fn of(kind: PolicyKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_tau > 0.5 && self.fixed_tau < 1.0) {
            return Err(Error::Config(format!("fixed_tau {} outside (0.5, 1)", self.fixed_tau)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if let Some((r, f)) = self.target_class_ratio {
            if r == 0 || f == 0 {
                return Err(Error::Config("target_class_ratio entries must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Covlm,
            fixed_tau: Self::default_tau(),
            ema_decay: Self::default_decay(),
            target_class_ratio: None,
        }
    }
}

/// `max(p, 1 - p)`.
pub fn confidence(y_hat: f64) -> f64 {
    y_hat.max(1.0 - y_hat)
}

/// Accept when confidence reaches the class threshold; exact ties at 0.5 are ignored.
pub fn select_with(y_hat: f64, tau_real: f64, tau_fake: f64) -> PseudoLabel {
    if y_hat > 0.5 {
        if y_hat >= tau_fake {
            PseudoLabel::Fake
        } else {
            PseudoLabel::Ignore
        }
    } else if y_hat < 0.5 {
        if 1.0 - y_hat >= tau_real {
            PseudoLabel::Real
        } else {
            PseudoLabel::Ignore
        }
    } else {
        PseudoLabel::Ignore
    }
}

/// Fixed-threshold selection.
pub fn fixmatch_select(y_hat: &[f64], tau: f64) -> Vec<PseudoLabel> {
    y_hat.iter().map(|&p| select_with(p, tau, tau)).collect()
}

/// Exponential moving average of the mean batch confidence.
pub fn freematch_update(tau: f64, confidences: &[f64], decay: f64) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
    Ok(decay * tau + (1.0 - decay) * mean)
}

/// Initial self-adaptive threshold for two classes.
pub const FREEMATCH_INIT: f64 = 0.5;

/// Class-dependent thresholds `(tau_real, tau_fake)`.
///
/// The majority class (larger share of `target_ratio`, Real on ties) keeps
/// `fixed_tau`. The minority threshold drops to the confidence of its m-th
/// most confident prediction, where m makes the accepted counts follow the
/// target ratio; it never rises above `fixed_tau`.
pub fn adsh_thresholds(
    real_pool: &[f64],
    fake_pool: &[f64],
    fixed_tau: f64,
    target_ratio: (u32, u32),
) -> Result<(f64, f64)> {
    if real_pool.is_empty() {
        return Err(Error::Insufficient("no samples predicted real".into()));
    }
    if fake_pool.is_empty() {
        return Err(Error::Insufficient("no samples predicted fake".into()));
    }
    let real_major = target_ratio.0 >= target_ratio.1;
    let (major, minor, major_share, minor_share) = if real_major {
        (real_pool, fake_pool, target_ratio.0, target_ratio.1)
    } else {
        (fake_pool, real_pool, target_ratio.1, target_ratio.0)
    };
    let accepted_major = major.iter().filter(|&&c| c >= fixed_tau).count();
    let wanted = (accepted_major as f64 * minor_share as f64 / major_share as f64).round() as usize;
    let tau_minor = if wanted == 0 {
        fixed_tau
    } else {
        let mut sorted = minor.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[wanted.min(sorted.len()) - 1].min(fixed_tau)
    };
    Ok(if real_major { (fixed_tau, tau_minor) } else { (tau_minor, fixed_tau) })
}

/// Runs the shared training loop with `policy` in place of the configured one.
pub fn run_baseline(policy: &PolicyConfig, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.policy = *policy;
    let echo = cfg.echo();
    Ok(experiment::run(&cfg, &echo, out)?.1)
}
