//! Synthetic dual-encoder datasets with known ground truth.
//!
//! Each sample draws an image direction `u` uniformly on the sphere. Its
//! caption is `normalize(u + sigma * g)` with a small sigma for real pairs and
//! a large one for fake pairs, and its generated caption is
//! `normalize(u + sigma_gen * g')`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::consensus::dot;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::store::{Class, EmbeddingRecord, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_real: usize,
    pub n_fake: usize,
    pub dim: usize,
    pub sigma_real: f64,
    pub sigma_fake: f64,
    pub sigma_gen: f64,
    pub seed: u64,
}

impl SynthParams {
    /// The desk-scale reference geometry: d=64, sigma 0.3 / 1.2 / 0.4.
    pub fn reference(n_real: usize, n_fake: usize, seed: u64) -> Self {
        Self {
            n_real,
            n_fake,
            dim: 64,
            sigma_real: 0.3,
            sigma_fake: 1.2,
            sigma_gen: 0.4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("dim {} must be >= 2", self.dim)));
        }
        if !(self.sigma_real > 0.0 && self.sigma_real < self.sigma_fake) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_real ({}) < sigma_fake ({})",
                self.sigma_real, self.sigma_fake
            )));
        }
        if !(self.sigma_gen > 0.0) || !self.sigma_fake.is_finite() || !self.sigma_gen.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma_gen {} must be positive", self.sigma_gen)));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn perturbed(u: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    u.iter().map(|&x| { let z: f64 = StandardNormal.sample(rng); x + sigma * z }).collect()
}

/// Generates `n_real` real samples (ids `0..n_real`) followed by `n_fake` fakes.
pub fn generate(params: &SynthParams) -> Result<Vec<EmbeddingRecord>> {
    params.validate()?;
    let mut rng = rng::seeded(params.seed);
    let labels = std::iter::repeat_n(Label::Real, params.n_real).chain(std::iter::repeat_n(Label::Fake, params.n_fake));
    labels
        .enumerate()
        .map(|(i, label)| {
            let mut u = gaussian(&mut rng, params.dim);
            let norm = dot(&u, &u).sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let sigma = if label == Label::Real { params.sigma_real } else { params.sigma_fake };
            let text = perturbed(&u, sigma, &mut rng);
            let gen = perturbed(&u, params.sigma_gen, &mut rng);
            EmbeddingRecord::from_f64(i as u64, label, &u, &text, &gen)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean_clip: f64,
    pub std_clip: f64,
    pub mean_blip: f64,
    pub std_blip: f64,
}

/// Per-class consensus-score statistics of a labeled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifficultyStats {
    pub real: ScoreStats,
    pub fake: ScoreStats,
    /// Fraction of fake samples whose S_c exceeds the real-class mean S_c.
    pub overlap: f64,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// (S_c, S_b) of a record with the unadapted image embedding.
pub fn raw_scores(r: &EmbeddingRecord) -> (f64, f64) {
    let (i, t, g) = (widen(r.image_emb()), widen(r.text_emb()), widen(r.gen_text_emb()));
    (dot(&i, &t), dot(&t, &g))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population mean/std of S_c and S_b per class; records without ground truth are skipped.
pub fn difficulty_stats(records: &[EmbeddingRecord]) -> Result<DifficultyStats> {
    let per_class = |class: Class| -> Result<(ScoreStats, Vec<f64>)> {
        let (clip, blip): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter(|r| r.label().class() == Some(class))
            .map(raw_scores)
            .unzip();
        if clip.is_empty() {
            return Err(Error::MissingClass(class.name()));
        }
        let (mean_clip, std_clip) = mean_std(&clip);
        let (mean_blip, std_blip) = mean_std(&blip);
        let stats = ScoreStats { count: clip.len(), mean_clip, std_clip, mean_blip, std_blip };
        Ok((stats, clip))
    };
    let (real, _) = per_class(Class::Real)?;
    let (fake, fake_clip) = per_class(Class::Fake)?;
    let above = fake_clip.iter().filter(|&&s| s > real.mean_clip).count();
    Ok(DifficultyStats { real, fake, overlap: above as f64 / fake_clip.len() as f64 })
}
