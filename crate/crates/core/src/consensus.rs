//! Consensus scores, class-mean thresholds, and the three-way pseudo-label rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Class;

/// Plain inner product. Callers check dimensions.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn checked_dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("consensus input".into()));
    }
    Ok(dot(a, b))
}

/// S_c: agreement between the image and its caption.
pub fn clip_score(image_emb: &[f64], text_emb: &[f64]) -> Result<f64> {
    checked_dot(image_emb, text_emb)
}

/// S_b: agreement between the caption and the captioner's generated caption.
pub fn blip_score(text_emb: &[f64], gen_text_emb: &[f64]) -> Result<f64> {
    checked_dot(text_emb, gen_text_emb)
}

/// Which pair of embeddings defines the BLIP consensus score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlipScoreMode {
    /// caption vs generated caption
    #[default]
    TextGen,
    /// image vs generated caption
    ImageGen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusScores {
    pub s_clip: f64,
    pub s_blip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub tau_c_real: f64,
    pub tau_c_fake: f64,
    pub tau_b_real: f64,
    pub tau_b_fake: f64,
}

impl ThresholdSet {
    /// True when a real-class mean does not exceed the matching fake-class mean.
    pub fn is_degenerate(&self) -> bool {
        self.tau_c_real <= self.tau_c_fake || self.tau_b_real <= self.tau_b_fake
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    Real,
    Fake,
    Ignore,
}

impl PseudoLabel {
    pub fn class(self) -> Option<Class> {
        match self {
            PseudoLabel::Real => Some(Class::Real),
            PseudoLabel::Fake => Some(Class::Fake),
            PseudoLabel::Ignore => None,
        }
    }
}

impl From<Class> for PseudoLabel {
    fn from(c: Class) -> Self {
        match c {
            Class::Real => PseudoLabel::Real,
            Class::Fake => PseudoLabel::Fake,
        }
    }
}

/// Per-class means of both scores, accumulated in input order.
pub fn estimate_thresholds(labeled: &[(ConsensusScores, Class)]) -> Result<ThresholdSet> {
    let mut sum = [[0.0f64; 2]; 2];
    let mut count = [0usize; 2];
    for (s, class) in labeled {
        let k = *class as usize;
        sum[k][0] += s.s_clip;
        sum[k][1] += s.s_blip;
        count[k] += 1;
    }
    for class in [Class::Real, Class::Fake] {
        if count[class as usize] == 0 {
            return Err(Error::MissingClass(class.name()));
        }
    }
    let mean = |class: Class, which: usize| sum[class as usize][which] / count[class as usize] as f64;
    let t = ThresholdSet {
        tau_c_real: mean(Class::Real, 0),
        tau_c_fake: mean(Class::Fake, 0),
        tau_b_real: mean(Class::Real, 1),
        tau_b_fake: mean(Class::Fake, 1),
    };
    if !(t.tau_c_real.is_finite() && t.tau_c_fake.is_finite() && t.tau_b_real.is_finite() && t.tau_b_fake.is_finite()) {
        return Err(Error::NonFinite("thresholds".into()));
    }
    if t.is_degenerate() {
        log::warn!("degenerate thresholds: real-class mean not above fake-class mean ({t:?})");
    }
    Ok(t)
}

/// Fake when both scores fall strictly below the fake thresholds, Real when
/// both lie strictly above the real thresholds, Ignore otherwise. The Fake
/// branch is tested first.
pub fn assign_pseudo_label(scores: ConsensusScores, t: &ThresholdSet) -> PseudoLabel {
    if scores.s_clip < t.tau_c_fake && scores.s_blip < t.tau_b_fake {
        PseudoLabel::Fake
    } else if scores.s_clip > t.tau_c_real && scores.s_blip > t.tau_b_real {
        PseudoLabel::Real
    } else {
        PseudoLabel::Ignore
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn s(c: f64, b: f64) -> ConsensusScores {
        ConsensusScores { s_clip: c, s_blip: b }
    }

    const T: ThresholdSet = ThresholdSet { tau_c_real: 0.5, tau_c_fake: 0.2, tau_b_real: 0.5, tau_b_fake: 0.2 };

    #[test]
    fn scores_on_simple_vectors() {
        let v = [0.6, 0.8];
        assert_eq!(clip_score(&v, &v).unwrap(), 1.0);
        assert_eq!(clip_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(blip_score(&[0.0, 1.0], &[0.0, -1.0]).unwrap(), -1.0);
        assert!(matches!(clip_score(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(blip_score(&[f64::NAN], &[1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dot_matches_hand_expansion() {
        let mut r = rng::seeded(1);
        let mut unit = || {
            let v: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (a, b) = (unit(), unit());
        let hand = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
        assert!((clip_score(&a, &b).unwrap() - hand).abs() < 1e-12);
        assert!((blip_score(&a, &b).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn two_point_mean() {
        let t = estimate_thresholds(&[
            (s(0.8, 0.1), Class::Real),
            (s(0.6, 0.3), Class::Real),
            (s(0.1, 0.0), Class::Fake),
        ])
        .unwrap();
        assert!((t.tau_c_real - 0.7).abs() < 1e-15);
        assert!((t.tau_b_real - 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_per_class_reproduces_scores() {
        let t = estimate_thresholds(&[(s(0.31, 0.12), Class::Fake), (s(0.77, 0.64), Class::Real)]).unwrap();
        assert_eq!(t, ThresholdSet { tau_c_real: 0.77, tau_c_fake: 0.31, tau_b_real: 0.64, tau_b_fake: 0.12 });
    }

    #[test]
    fn absent_class_errors() {
        assert!(matches!(estimate_thresholds(&[(s(0.3, 0.3), Class::Real)]), Err(Error::MissingClass("fake"))));
        assert!(matches!(estimate_thresholds(&[]), Err(Error::MissingClass("real"))));
    }

    #[test]
    fn eq1_branches() {
        assert_eq!(assign_pseudo_label(s(0.7, 0.6), &T), PseudoLabel::Real);
        assert_eq!(assign_pseudo_label(s(0.1, 0.1), &T), PseudoLabel::Fake);
        assert_eq!(assign_pseudo_label(s(0.7, 0.1), &T), PseudoLabel::Ignore);
        assert_eq!(assign_pseudo_label(s(0.5, 0.6), &T), PseudoLabel::Ignore);
        assert_eq!(assign_pseudo_label(s(0.2, 0.1), &T), PseudoLabel::Ignore);
    }

    #[test]
    fn degenerate_thresholds_take_fake_branch_first() {
        let t = ThresholdSet { tau_c_real: 0.1, tau_c_fake: 0.6, tau_b_real: 0.1, tau_b_fake: 0.6 };
        assert!(t.is_degenerate());
        assert_eq!(assign_pseudo_label(s(0.3, 0.3), &t), PseudoLabel::Fake);
    }

    proptest! {
        #[test]
        fn thresholds_permutation_invariant(
            items in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, any::<bool>()), 2..60),
            seed: u64,
        ) {
            let mut v: Vec<(ConsensusScores, Class)> = items
                .iter()
                .map(|&(c, b, fake)| (s(c, b), if fake { Class::Fake } else { Class::Real }))
                .collect();
            v.push((s(0.0, 0.0), Class::Real));
            v.push((s(0.0, 0.0), Class::Fake));
            let a = estimate_thresholds(&v).unwrap();
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng::seeded(seed));
            let b = estimate_thresholds(&v).unwrap();
            prop_assert!((a.tau_c_real - b.tau_c_real).abs() < 1e-12);
            prop_assert!((a.tau_c_fake - b.tau_c_fake).abs() < 1e-12);
            prop_assert!((a.tau_b_real - b.tau_b_real).abs() < 1e-12);
            prop_assert!((a.tau_b_fake - b.tau_b_fake).abs() < 1e-12);
        }

        #[test]
        fn separated_thresholds_never_overlap(c in -1.0f64..1.0, b in -1.0f64..1.0, lo in -1.0f64..1.0, gap in 0.0f64..1.0, lo2 in -1.0f64..1.0, gap2 in 0.0f64..1.0) {
            let t = ThresholdSet { tau_c_fake: lo, tau_c_real: lo + gap, tau_b_fake: lo2, tau_b_real: lo2 + gap2 };
            let fake = c < t.tau_c_fake && b < t.tau_b_fake;
            let real = c > t.tau_c_real && b > t.tau_b_real;
            prop_assert!(!(fake && real));
        }
    }
}
