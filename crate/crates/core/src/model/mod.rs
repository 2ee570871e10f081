//! Trainable parameters: a linear adapter on the image embedding and the
//! two-layer classification head (linear, batch norm, ReLU, dropout, linear,
//! sigmoid) applied to the elementwise product of image and caption embeddings.

mod backward;
pub mod checkpoint;
pub mod loss;
pub mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use backward::{backward, evaluate_objective, Gradients, Objective};
pub use loss::{
    loss_contrastive_cluster, loss_supervised, loss_unsupervised, similarity_prob, total_loss, LossBreakdown,
    PROB_EPS,
};
pub use optim::{adam_step, adam_update, lr_schedule, AdamConfig, OptimizerState, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width; `None` means the embedding dimension.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "HeadConfig::default_dropout")]
    pub dropout: f64,
    #[serde(default = "HeadConfig::default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "HeadConfig::default_bn_eps")]
    pub bn_eps: f64,
}

impl HeadConfig {
    fn default_dropout() -> f64 {
        0.5
    }
    fn default_momentum() -> f64 {
        0.1
    }
    fn default_bn_eps() -> f64 {
        1e-5
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum {} outside (0,1]", self.bn_momentum)));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_eps must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            dropout: Self::default_dropout(),
            bn_momentum: Self::default_momentum(),
            bn_eps: Self::default_bn_eps(),
        }
    }
}

/// d x d linear map applied to image embeddings, followed by renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub dim: usize,
    /// row-major
    pub weight: Vec<f64>,
}

impl Adapter {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self { dim, weight }
    }

    /// Writes `A v` into `out` and returns its norm.
    fn apply(&self, v: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut sq = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weight[i * d..(i + 1) * d];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
            sq += *o * *o;
        }
        sq.sqrt()
    }

    /// `normalize(A v)`.
    pub fn adapt(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let mut out = vec![0.0; self.dim];
        let norm = self.apply(v, &mut out);
        if !(norm >= 1e-12) {
            return Err(Error::ZeroNorm(norm));
        }
        out.iter_mut().for_each(|x| *x /= norm);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub dim: usize,
    pub hidden: usize,
    /// hidden x dim, row-major
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Head {
    /// Linear layers drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); batch norm at identity.
    pub fn init(dim: usize, cfg: &HeadConfig, rng: &mut Rng) -> Self {
        let hidden = cfg.hidden.unwrap_or(dim);
        let mut uniform = |fan_in: usize, n: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>()
        };
        let w1 = uniform(dim, hidden * dim);
        let b1 = uniform(dim, hidden);
        let w2 = uniform(hidden, hidden);
        let b2 = uniform(hidden, 1)[0];
        Self {
            dim,
            hidden,
            w1,
            b1,
            gamma: vec![1.0; hidden],
            beta: vec![0.0; hidden],
            running_mean: vec![0.0; hidden],
            running_var: vec![1.0; hidden],
            w2,
            b2,
            dropout: cfg.dropout,
            bn_momentum: cfg.bn_momentum,
            bn_eps: cfg.bn_eps,
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn absorb_batch_stats(&mut self, fp: &ForwardPass) {
        let Some(stats) = &fp.batch_stats else { return };
        let n = fp.n as f64;
        let m = self.bn_momentum;
        for j in 0..self.hidden {
            let unbiased = if fp.n > 1 { stats.var[j] * n / (n - 1.0) } else { stats.var[j] };
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * unbiased;
        }
    }
}

/// Adapter plus head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub adapter: Adapter,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Everything a forward pass computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    pub n: usize,
    pub(crate) dim: usize,
    pub(crate) hidden: usize,
    pub(crate) image: Vec<f64>,
    pub(crate) text: Vec<f64>,
    /// norms of `A u` per sample
    pub(crate) norms: Vec<f64>,
    /// adapted, normalized image embeddings (n x d)
    pub adapted: Vec<f64>,
    /// adapted image ⊙ text (n x d)
    pub(crate) features: Vec<f64>,
    pub(crate) normalized: Vec<f64>,
    pub(crate) inv_std: Vec<f64>,
    pub(crate) bn_out: Vec<f64>,
    pub(crate) dropout_mask: Vec<f64>,
    pub(crate) activations: Vec<f64>,
    pub(crate) batch_stats: Option<BatchStats>,
    pub logits: Vec<f64>,
    /// P(Fake), clamped to [PROB_EPS, 1 - PROB_EPS]
    pub y_hat: Vec<f64>,
}

impl ForwardPass {
    /// CLIP consensus score of sample `i` with the adapted image embedding.
    pub fn clip_score(&self, i: usize) -> f64 {
        self.features[i * self.dim..(i + 1) * self.dim].iter().sum()
    }

    pub fn adapted_image(&self, i: usize) -> &[f64] {
        &self.adapted[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Model {
    pub fn new(dim: usize, cfg: &HeadConfig, rng: &mut Rng) -> Self {
        Self { adapter: Adapter::identity(dim), head: Head::init(dim, cfg, rng) }
    }

    pub fn dim(&self) -> usize {
        self.adapter.dim
    }

    /// Runs the batch through adapter and head. Train mode normalizes with
    /// batch statistics and applies inverted dropout drawn from `rng`; eval
    /// mode uses running statistics and never touches `rng`.
    pub fn forward(&self, images: &[&[f64]], texts: &[&[f64]], mode: Mode, rng: Option<&mut Rng>) -> Result<ForwardPass> {
        let n = images.len();
        let d = self.dim();
        let head = &self.head;
        let h = head.hidden;
        if texts.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: texts.len() });
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidArgument("train-mode batch norm needs at least 2 samples".into()));
        }
        for v in images.iter().chain(texts) {
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
        }

        let image: Vec<f64> = images.iter().flat_map(|v| v.iter().copied()).collect();
        let text: Vec<f64> = texts.iter().flat_map(|v| v.iter().copied()).collect();
        let mut adapted = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let out = &mut adapted[i * d..(i + 1) * d];
            let norm = self.adapter.apply(&image[i * d..(i + 1) * d], out);
            if !(norm >= 1e-12) {
                return Err(Error::ZeroNorm(norm));
            }
            out.iter_mut().for_each(|x| *x /= norm);
            norms[i] = norm;
        }
        let features: Vec<f64> = adapted.iter().zip(&text).map(|(a, t)| a * t).collect();

        let mut pre = vec![0.0; n * h];
        for i in 0..n {
            let x = &features[i * d..(i + 1) * d];
            for j in 0..h {
                let row = &head.w1[j * d..(j + 1) * d];
                pre[i * h + j] = head.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
        }

        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; h];
                let mut var = vec![0.0; h];
                for i in 0..n {
                    for j in 0..h {
                        mean[j] += pre[i * h + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for i in 0..n {
                    for j in 0..h {
                        let c = pre[i * h + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            Mode::Eval => (head.running_mean.clone(), head.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + head.bn_eps).sqrt()).collect();

        let mut normalized = vec![0.0; n * h];
        let mut bn_out = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                let zh = (pre[i * h + j] - mean[j]) * inv_std[j];
                normalized[i * h + j] = zh;
                bn_out[i * h + j] = head.gamma[j] * zh + head.beta[j];
            }
        }

        let dropout_mask = match (mode, head.dropout > 0.0) {
            (Mode::Train, true) => {
                let rng = rng.ok_or_else(|| Error::InvalidArgument("train-mode dropout needs an rng".into()))?;
                let keep = 1.0 - head.dropout;
                (0..n * h).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
            }
            _ => vec![1.0; n * h],
        };
        let activations: Vec<f64> = bn_out
            .iter()
            .zip(&dropout_mask)
            .map(|(&y, &m)| if y > 0.0 { y * m } else { 0.0 })
            .collect();

        let mut logits = vec![0.0; n];
        let mut y_hat = vec![0.0; n];
        for i in 0..n {
            let q = &activations[i * h..(i + 1) * h];
            logits[i] = head.b2 + head.w2.iter().zip(q).map(|(w, a)| w * a).sum::<f64>();
            y_hat[i] = sigmoid(logits[i]).clamp(PROB_EPS, 1.0 - PROB_EPS);
        }
        Ok(ForwardPass {
            mode,
            n,
            dim: d,
            hidden: h,
            image,
            text,
            norms,
            adapted,
            features,
            normalized,
            inv_std,
            bn_out,
            dropout_mask,
            activations,
            batch_stats,
            logits,
            y_hat,
        })
    }

    /// Eval-mode probabilities of Fake.
    pub fn predict(&self, images: &[&[f64]], texts: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(self.forward(images, texts, Mode::Eval, None)?.y_hat)
    }
}
