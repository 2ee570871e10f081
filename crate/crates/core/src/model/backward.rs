//! Analytic gradients of the combined objective for the fixed architecture.

use crate::consensus::PseudoLabel;
use crate::error::{Error, Result};
use crate::store::Class;

use super::loss::{loss_contrastive_cluster, loss_supervised, loss_unsupervised, total_loss, LossBreakdown, PROB_EPS};
use super::{sigmoid, ForwardPass, Mode, Model};

/// Which rows of a forward batch carry which loss.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    /// (row, class) pairs receiving cross-entropy and contrastive clustering terms
    pub labeled: &'a [(usize, Class)],
    /// (row, pseudo-label) pairs; `Ignore` rows contribute nothing
    pub unlabeled: &'a [(usize, PseudoLabel)],
    pub lambda: f64,
}

/// Gradients for every trainable block, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub adapter: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradients {
    pub fn blocks(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("adapter", &self.adapter),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("w2", &self.w2),
            ("b2", std::slice::from_ref(&self.b2)),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, b)| b.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl Model {
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 7] {
        let h = &mut self.head;
        [
            ("adapter", &mut self.adapter.weight),
            ("w1", &mut h.w1),
            ("b1", &mut h.b1),
            ("gamma", &mut h.gamma),
            ("beta", &mut h.beta),
            ("w2", &mut h.w2),
            ("b2", std::slice::from_mut(&mut h.b2)),
        ]
    }
}

fn unclamped(p: f64) -> bool {
    p > PROB_EPS && p < 1.0 - PROB_EPS
}

fn check_rows(n: usize, rows: impl Iterator<Item = usize>) -> Result<()> {
    for r in rows {
        if r >= n {
            return Err(Error::InvalidArgument(format!("row {r} outside batch of {n}")));
        }
    }
    Ok(())
}

/// Loss breakdown of `objective` on a recorded forward pass.
pub fn evaluate_objective(fp: &ForwardPass, objective: &Objective) -> Result<(LossBreakdown, usize)> {
    check_rows(fp.n, objective.labeled.iter().map(|l| l.0).chain(objective.unlabeled.iter().map(|u| u.0)))?;
    let (l_sup, l_cc) = if objective.labeled.is_empty() {
        (0.0, 0.0)
    } else {
        let classes: Vec<Class> = objective.labeled.iter().map(|l| l.1).collect();
        let y: Vec<f64> = objective.labeled.iter().map(|l| fp.y_hat[l.0]).collect();
        let s: Vec<f64> = objective.labeled.iter().map(|l| fp.clip_score(l.0)).collect();
        (loss_supervised(&y, &classes)?, loss_contrastive_cluster(&s, &classes)?)
    };
    let y_ul: Vec<f64> = objective.unlabeled.iter().map(|u| fp.y_hat[u.0]).collect();
    let pseudo: Vec<PseudoLabel> = objective.unlabeled.iter().map(|u| u.1).collect();
    let (l_unsup, accepted) = loss_unsupervised(&y_ul, &pseudo)?;
    Ok((total_loss(l_sup, l_cc, l_unsup, objective.lambda), accepted))
}

/// Evaluates the objective and returns its exact gradient with respect to
/// adapter and head parameters. Batch-norm statistics are differentiated in
/// train mode and held constant in eval mode; pseudo-labels are constants.
pub fn backward(model: &Model, fp: &ForwardPass, objective: &Objective) -> Result<(LossBreakdown, Gradients)> {
    let (losses, accepted) = evaluate_objective(fp, objective)?;
    let (n, d, h) = (fp.n, fp.dim, fp.hidden);
    let head = &model.head;
    if model.dim() != d || head.hidden != h {
        return Err(Error::DimensionMismatch { expected: d, got: model.dim() });
    }

    // dL/dlogit and dL/dS_c per row
    let mut g_logit = vec![0.0; n];
    let mut g_score = vec![0.0; n];
    let n_lab = objective.labeled.len() as f64;
    for &(row, class) in objective.labeled {
        let p = sigmoid(fp.logits[row]);
        if unclamped(p) {
            g_logit[row] += (p - class.target()) / n_lab;
        }
        if objective.lambda != 0.0 {
            let raw = (1.0 + fp.clip_score(row)) / 2.0;
            if unclamped(raw) {
                let t = 1.0 - class.target();
                g_score[row] += objective.lambda * (raw - t) / (raw * (1.0 - raw)) / n_lab * 0.5;
            }
        }
    }
    if accepted > 0 {
        for &(row, label) in objective.unlabeled {
            let Some(class) = label.class() else { continue };
            let p = sigmoid(fp.logits[row]);
            if unclamped(p) {
                g_logit[row] += (p - class.target()) / accepted as f64;
            }
        }
    }

    // output layer
    let mut w2 = vec![0.0; h];
    let mut b2 = 0.0;
    let mut g_bn = vec![0.0; n * h];
    for i in 0..n {
        let g = g_logit[i];
        if g == 0.0 {
            continue;
        }
        b2 += g;
        for j in 0..h {
            w2[j] += g * fp.activations[i * h + j];
            let k = i * h + j;
            if fp.bn_out[k] > 0.0 {
                g_bn[k] = g * head.w2[j] * fp.dropout_mask[k];
            }
        }
    }

    // batch norm affine
    let mut gamma = vec![0.0; h];
    let mut beta = vec![0.0; h];
    let mut g_norm = vec![0.0; n * h];
    for i in 0..n {
        for j in 0..h {
            let k = i * h + j;
            gamma[j] += g_bn[k] * fp.normalized[k];
            beta[j] += g_bn[k];
            g_norm[k] = g_bn[k] * head.gamma[j];
        }
    }

    // batch norm normalization
    let mut g_pre = vec![0.0; n * h];
    match fp.mode {
        Mode::Eval => {
            for i in 0..n {
                for j in 0..h {
                    g_pre[i * h + j] = g_norm[i * h + j] * fp.inv_std[j];
                }
            }
        }
        Mode::Train => {
            let nf = n as f64;
            for j in 0..h {
                let mut sum = 0.0;
                let mut sum_xhat = 0.0;
                for i in 0..n {
                    sum += g_norm[i * h + j];
                    sum_xhat += g_norm[i * h + j] * fp.normalized[i * h + j];
                }
                for i in 0..n {
                    let k = i * h + j;
                    g_pre[k] = fp.inv_std[j] / nf * (nf * g_norm[k] - sum - fp.normalized[k] * sum_xhat);
                }
            }
        }
    }

    // first linear layer and the feature gradient
    let mut w1 = vec![0.0; h * d];
    let mut b1 = vec![0.0; h];
    let mut adapter = vec![0.0; d * d];
    let mut g_x = vec![0.0; d];
    let mut g_a = vec![0.0; d];
    let mut g_v = vec![0.0; d];
    for i in 0..n {
        let x = &fp.features[i * d..(i + 1) * d];
        g_x.iter_mut().for_each(|v| *v = g_score[i]);
        for j in 0..h {
            let g = g_pre[i * h + j];
            if g == 0.0 {
                continue;
            }
            b1[j] += g;
            let w_row = &head.w1[j * d..(j + 1) * d];
            let gw_row = &mut w1[j * d..(j + 1) * d];
            for k in 0..d {
                gw_row[k] += g * x[k];
                g_x[k] += g * w_row[k];
            }
        }
        // x = â ⊙ t, and S_c = Σ x, so dL/dâ = t ⊙ (dL/dx + dL/dS_c)
        let t = &fp.text[i * d..(i + 1) * d];
        let a_hat = fp.adapted_image(i);
        for k in 0..d {
            g_a[k] = g_x[k] * t[k];
        }
        // â = v / |v|
        let proj: f64 = g_a.iter().zip(a_hat).map(|(g, a)| g * a).sum();
        let inv = 1.0 / fp.norms[i];
        for k in 0..d {
            g_v[k] = (g_a[k] - proj * a_hat[k]) * inv;
        }
        // v = A u
        let u = &fp.image[i * d..(i + 1) * d];
        for r in 0..d {
            let g = g_v[r];
            if g == 0.0 {
                continue;
            }
            let row = &mut adapter[r * d..(r + 1) * d];
            for c in 0..d {
                row[c] += g * u[c];
            }
        }
    }

    Ok((losses, Gradients { adapter, w1, b1, gamma, beta, w2, b2 }))
}
