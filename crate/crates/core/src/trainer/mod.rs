//! Warm-up, semi-supervised epochs, evaluation and run bookkeeping.

mod data;
mod metrics;

pub use data::{chunk_bounds, CyclingLoader, Dataset, OrderDigest, Split};
pub use metrics::{decide, evaluate_predictions, pseudo_label_quality, ClassCounts, EvalMetrics, PseudoLabelQuality};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, confidence, PolicyConfig, PolicyKind};
use crate::consensus::{self, assign_pseudo_label, dot, BlipScoreMode, ConsensusScores, PseudoLabel, ThresholdSet};
use crate::error::{Error, Result};
use crate::model::{
    adam_step, backward, lr_schedule, AdamConfig, HeadConfig, LossBreakdown, Mode, Model, Objective, OptimizerState,
    Schedule,
};
use crate::rng::{self, Rng, Stream};
use crate::store::Class;

/// When consensus thresholds are re-estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRefresh {
    /// once per epoch from the whole labeled split
    #[default]
    PerEpoch,
    /// from every labeled minibatch
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    /// epochs at `lr0` before cosine annealing starts
    pub const_lr_epochs: usize,
    pub warmup_epochs: usize,
    pub lambda: f64,
    /// learning-rate multiplier of the image adapter relative to the head
    pub adapter_lr_scale: f64,
    /// include the pseudo-label cross-entropy term
    pub use_unlabeled_loss: bool,
    pub threshold_refresh: ThresholdRefresh,
    pub blip_score_mode: BlipScoreMode,
    pub head: HeadConfig,
    pub adam: AdamConfig,
    /// write a checkpoint every this many epochs
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr0: 5e-4,
            lr_min: 0.0,
            const_lr_epochs: 20,
            warmup_epochs: 5,
            lambda: 1.0,
            adapter_lr_scale: 0.1,
            use_unlabeled_loss: true,
            threshold_refresh: ThresholdRefresh::PerEpoch,
            blip_score_mode: BlipScoreMode::TextGen,
            head: HeadConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} below 2", self.batch_size));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return bad(format!("lr_min {} outside [0, lr0]", self.lr_min));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.adapter_lr_scale.is_finite() && self.adapter_lr_scale >= 0.0) {
            return bad(format!("adapter_lr_scale {} must be non-negative", self.adapter_lr_scale));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        let a = &self.adam;
        if !(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps be positive".into());
        }
        self.head.validate()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { lr0: self.lr0, lr_min: self.lr_min, const_epochs: self.const_lr_epochs, total_epochs: self.epochs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// digest of the labeled sample ids in visiting order
    pub labeled_order: String,
    /// digest of the unlabeled sample ids in visiting order
    pub unlabeled_order: String,
    /// step-averaged losses
    pub losses: LossBreakdown,
    pub thresholds: Option<ThresholdSet>,
    /// confidence thresholds (real, fake) of a confidence-based policy
    pub policy_tau: Option<(f64, f64)>,
    pub pseudo: PseudoLabelQuality,
    pub val: Option<EvalMetrics>,
    pub test: Option<EvalMetrics>,
}

const EVAL_CHUNK: usize = 1024;

fn predict_rows(model: &Model, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let images: Vec<&[f64]> = chunk.iter().map(|&r| data.image(r)).collect();
        let texts: Vec<&[f64]> = chunk.iter().map(|&r| data.text(r)).collect();
        out.extend(model.predict(&images, &texts)?);
    }
    Ok(out)
}

/// Eval-mode accuracy figures on labeled rows.
pub fn evaluate(model: &Model, data: &Dataset, rows: &[(usize, Class)]) -> Result<EvalMetrics> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let predicted: Vec<Class> = predict_rows(model, data, &idx)?.into_iter().map(decide).collect();
    let truth: Vec<Class> = rows.iter().map(|r| r.1).collect();
    evaluate_predictions(&predicted, &truth)
}

/// Consensus scores of one row under the current adapter.
pub fn consensus_scores(model: &Model, data: &Dataset, row: usize, mode: BlipScoreMode) -> Result<ConsensusScores> {
    let adapted = model.adapter.adapt(data.image(row))?;
    let s_blip = match mode {
        BlipScoreMode::TextGen => data.blip_text_score(row),
        BlipScoreMode::ImageGen => dot(&adapted, data.gen_text(row)),
    };
    Ok(ConsensusScores { s_clip: dot(&adapted, data.text(row)), s_blip })
}

fn mean_losses(sum: LossBreakdown, steps: usize, lambda: f64) -> LossBreakdown {
    if steps == 0 {
        return LossBreakdown { lambda, ..Default::default() };
    }
    let k = steps as f64;
    LossBreakdown {
        l_sup: sum.l_sup / k,
        l_cc: sum.l_cc / k,
        l_unsup: sum.l_unsup / k,
        lambda,
        total: sum.total / k,
    }
}

fn accumulate(sum: &mut LossBreakdown, l: &LossBreakdown) {
    sum.l_sup += l.l_sup;
    sum.l_cc += l.l_cc;
    sum.l_unsup += l.l_unsup;
    sum.total += l.total;
}

/// Training state for one run: model, optimizer, loaders and policy state.
pub struct Trainer<'a> {
    data: &'a Dataset,
    split: &'a Split,
    cfg: TrainConfig,
    policy: PolicyConfig,
    pub model: Model,
    opt: OptimizerState,
    labeled: CyclingLoader<(usize, Class)>,
    unlabeled_order: Vec<usize>,
    unlabeled_rng: Rng,
    dropout_rng: Rng,
    freematch_tau: f64,
    adsh_ratio: (u32, u32),
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, split: &'a Split, cfg: &TrainConfig, policy: &PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        policy.validate()?;
        split.check_labeled()?;
        if data.dim() == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let mut model = Model::new(data.dim(), &cfg.head, &mut rng::stream(seed, Stream::Init));
        let mut opt = OptimizerState::new(&mut model, cfg.adam);
        opt.lr_scale[0] = cfg.adapter_lr_scale;
        let (real, fake) = split.labeled_counts();
        Ok(Self {
            data,
            split,
            cfg: *cfg,
            policy: *policy,
            model,
            opt,
            labeled: CyclingLoader::new(split.labeled.clone(), cfg.batch_size, rng::stream(seed, Stream::LabeledLoader)),
            unlabeled_order: split.unlabeled.clone(),
            unlabeled_rng: rng::stream(seed, Stream::UnlabeledLoader),
            dropout_rng: rng::stream(seed, Stream::Dropout),
            freematch_tau: baselines::FREEMATCH_INIT,
            adsh_ratio: policy.target_class_ratio.unwrap_or((real as u32, fake as u32)),
        })
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.step
    }

    /// Whether epochs iterate the unlabeled pool.
    /// Whether the unlabeled loader sets the epoch length.
    pub fn iterates_unlabeled(&self) -> bool {
        self.policy.kind != PolicyKind::SupOnly && !self.split.unlabeled.is_empty()
    }

    /// Whether unlabeled batches contribute a loss term.
    pub fn uses_unlabeled(&self) -> bool {
        self.iterates_unlabeled() && self.cfg.use_unlabeled_loss
    }

    /// One optimizer step on labeled rows plus accepted unlabeled rows;
    /// ignored rows are left out of the forward pass entirely.
    pub fn step(&mut self, labeled: &[(usize, Class)], unlabeled: &[(usize, PseudoLabel)], lr: f64, lambda: f64) -> Result<LossBreakdown> {
        let accepted: Vec<(usize, PseudoLabel)> =
            unlabeled.iter().copied().filter(|u| u.1 != PseudoLabel::Ignore).collect();
        let rows: Vec<usize> = labeled.iter().map(|l| l.0).chain(accepted.iter().map(|u| u.0)).collect();
        let images: Vec<&[f64]> = rows.iter().map(|&r| self.data.image(r)).collect();
        let texts: Vec<&[f64]> = rows.iter().map(|&r| self.data.text(r)).collect();
        let fp = self.model.forward(&images, &texts, Mode::Train, Some(&mut self.dropout_rng))?;
        let lab: Vec<(usize, Class)> = labeled.iter().enumerate().map(|(i, l)| (i, l.1)).collect();
        let unl: Vec<(usize, PseudoLabel)> =
            accepted.iter().enumerate().map(|(j, u)| (labeled.len() + j, u.1)).collect();
        let objective = Objective { labeled: &lab, unlabeled: &unl, lambda };
        let (losses, grads) = backward(&self.model, &fp, &objective)?;
        adam_step(&mut self.model, &grads, &mut self.opt, lr)?;
        self.model.head.absorb_batch_stats(&fp);
        Ok(losses)
    }

    /// Trains on labeled data only at the initial rate. Returns the mean
    /// losses of every warm-up epoch.
    pub fn warmup(&mut self) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::with_capacity(self.cfg.warmup_epochs);
        for _ in 0..self.cfg.warmup_epochs {
            let steps = self.labeled.batches_per_pass();
            let mut sum = LossBreakdown::default();
            for _ in 0..steps {
                let lb = self.labeled.next_batch();
                let l = self.step(&lb, &[], self.cfg.lr0, self.cfg.lambda)?;
                accumulate(&mut sum, &l);
            }
            out.push(mean_losses(sum, steps, self.cfg.lambda));
        }
        Ok(out)
    }

    /// Thresholds from the whole labeled split with the current adapter.
    pub fn estimate_thresholds(&self) -> Result<ThresholdSet> {
        self.thresholds_from(&self.split.labeled)
    }

    fn thresholds_from(&self, rows: &[(usize, Class)]) -> Result<ThresholdSet> {
        let scored: Vec<(ConsensusScores, Class)> = rows
            .iter()
            .map(|&(r, c)| Ok((consensus_scores(&self.model, self.data, r, self.cfg.blip_score_mode)?, c)))
            .collect::<Result<_>>()?;
        consensus::estimate_thresholds(&scored)
    }

    fn adsh_epoch_thresholds(&self) -> Result<(f64, f64)> {
        let y = predict_rows(&self.model, self.data, &self.split.unlabeled)?;
        let real: Vec<f64> = y.iter().filter(|&&p| p < 0.5).map(|&p| confidence(p)).collect();
        let fake: Vec<f64> = y.iter().filter(|&&p| p > 0.5).map(|&p| confidence(p)).collect();
        let tau = self.policy.fixed_tau;
        match baselines::adsh_thresholds(&real, &fake, tau, self.adsh_ratio) {
            Err(Error::Insufficient(msg)) => {
                log::debug!("adsh falls back to the fixed threshold: {msg}");
                Ok((tau, tau))
            }
            other => other,
        }
    }

    fn pseudo_labels(
        &mut self,
        ub: &[usize],
        lb: &[(usize, Class)],
        epoch_thresholds: Option<&ThresholdSet>,
        adsh: Option<(f64, f64)>,
        batch_thresholds: &mut Vec<ThresholdSet>,
    ) -> Result<Vec<PseudoLabel>> {
        let predict = |t: &Self| predict_rows(&t.model, t.data, ub);
        match self.policy.kind {
            PolicyKind::Covlm => {
                let mut t = *epoch_thresholds.ok_or_else(|| Error::InvalidArgument("missing thresholds".into()))?;
                if self.cfg.threshold_refresh == ThresholdRefresh::PerBatch {
                    match self.thresholds_from(lb) {
                        Ok(bt) => t = bt,
                        Err(Error::MissingClass(_)) => {}
                        Err(e) => return Err(e),
                    }
                    batch_thresholds.push(t);
                }
                ub.iter()
                    .map(|&r| Ok(assign_pseudo_label(consensus_scores(&self.model, self.data, r, self.cfg.blip_score_mode)?, &t)))
                    .collect()
            }
            PolicyKind::SupOnly => Ok(vec![PseudoLabel::Ignore; ub.len()]),
            PolicyKind::Fixmatch => Ok(baselines::fixmatch_select(&predict(self)?, self.policy.fixed_tau)),
            PolicyKind::FreematchStar => {
                let y = predict(self)?;
                let conf: Vec<f64> = y.iter().map(|&p| confidence(p)).collect();
                self.freematch_tau = baselines::freematch_update(self.freematch_tau, &conf, self.policy.ema_decay)?;
                Ok(baselines::fixmatch_select(&y, self.freematch_tau))
            }
            PolicyKind::Adsh => {
                let (tr, tf) = adsh.ok_or_else(|| Error::InvalidArgument("missing adsh thresholds".into()))?;
                Ok(predict(self)?.into_iter().map(|p| baselines::select_with(p, tr, tf)).collect())
            }
        }
    }

    /// One epoch at the scheduled rate. The unlabeled pool defines the epoch
    /// length; without it the epoch is one pass over the labeled split.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let lr = lr_schedule(epoch, &self.cfg.schedule())?;
        let lambda = self.cfg.lambda;
        let iterate = self.iterates_unlabeled();
        let semi = self.uses_unlabeled();
        let (mut lab_digest, mut unl_digest) = (OrderDigest::default(), OrderDigest::default());
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        let mut assigned = Vec::new();
        let mut truth = Vec::new();
        let mut batch_thresholds = Vec::new();

        let epoch_thresholds = if semi && self.policy.kind == PolicyKind::Covlm {
            Some(self.estimate_thresholds()?)
        } else {
            None
        };
        let adsh = if semi && self.policy.kind == PolicyKind::Adsh { Some(self.adsh_epoch_thresholds()?) } else { None };

        if iterate {
            self.unlabeled_order.shuffle(&mut self.unlabeled_rng);
            let order = std::mem::take(&mut self.unlabeled_order);
            for ub in order.chunks(self.cfg.batch_size) {
                let lb = self.labeled.next_batch();
                lb.iter().for_each(|l| lab_digest.push(self.data.id(l.0)));
                ub.iter().for_each(|&r| unl_digest.push(self.data.id(r)));
                if !semi {
                    let l = self.step(&lb, &[], lr, lambda)?;
                    accumulate(&mut sum, &l);
                    steps += 1;
                    continue;
                }
                let labels = self.pseudo_labels(ub, &lb, epoch_thresholds.as_ref(), adsh, &mut batch_thresholds)?;
                let pairs: Vec<(usize, PseudoLabel)> = ub.iter().copied().zip(labels.iter().copied()).collect();
                let l = self.step(&lb, &pairs, lr, lambda)?;
                accumulate(&mut sum, &l);
                steps += 1;
                assigned.extend(labels);
                truth.extend(ub.iter().map(|&r| self.data.label(r)));
            }
            self.unlabeled_order = order;
        } else {
            for _ in 0..self.labeled.batches_per_pass() {
                let lb = self.labeled.next_batch();
                lb.iter().for_each(|l| lab_digest.push(self.data.id(l.0)));
                let l = self.step(&lb, &[], lr, lambda)?;
                accumulate(&mut sum, &l);
                steps += 1;
            }
        }

        let thresholds = if batch_thresholds.is_empty() {
            epoch_thresholds
        } else {
            let k = batch_thresholds.len() as f64;
            let avg = |f: fn(&ThresholdSet) -> f64| batch_thresholds.iter().map(f).sum::<f64>() / k;
            Some(ThresholdSet {
                tau_c_real: avg(|t| t.tau_c_real),
                tau_c_fake: avg(|t| t.tau_c_fake),
                tau_b_real: avg(|t| t.tau_b_real),
                tau_b_fake: avg(|t| t.tau_b_fake),
            })
        };
        let policy_tau = match self.policy.kind {
            _ if !semi => None,
            PolicyKind::Fixmatch => Some((self.policy.fixed_tau, self.policy.fixed_tau)),
            PolicyKind::FreematchStar => Some((self.freematch_tau, self.freematch_tau)),
            PolicyKind::Adsh => adsh,
            _ => None,
        };
        let eval = |rows: &[(usize, Class)]| -> Result<Option<EvalMetrics>> {
            if rows.is_empty() {
                Ok(None)
            } else {
                evaluate(&self.model, self.data, rows).map(Some)
            }
        };
        Ok(EpochMetrics {
            epoch,
            lr,
            steps,
            labeled_order: lab_digest.hex(),
            unlabeled_order: unl_digest.hex(),
            losses: mean_losses(sum, steps, lambda),
            thresholds,
            policy_tau,
            pseudo: pseudo_label_quality(&assigned, &truth)?,
            val: eval(&self.split.val)?,
            test: eval(&self.split.test)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub test: Option<EvalMetrics>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub warmup: Vec<LossBreakdown>,
    pub history: Vec<EpochMetrics>,
    /// last-epoch model on the test split
    pub final_test: Option<EvalMetrics>,
    /// epoch with the highest validation accuracy (earliest on ties)
    pub best_val: Option<BestEpoch>,
    pub optimizer_steps: u64,
}

/// Warm-up followed by all scheduled epochs. `observer` sees every epoch's
/// metrics and the model right after it.
pub fn fit(
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    policy: &PolicyConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(data, split, cfg, policy, seed)?;
    let warmup = trainer.warmup()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = trainer.train_epoch(epoch)?;
        log::info!(
            "epoch {epoch}: loss {:.4} coverage {:.3} val {}",
            m.losses.total,
            m.pseudo.coverage,
            m.val.map_or("-".to_string(), |v| format!("{:.4}", v.accuracy))
        );
        observer(&m, &trainer.model)?;
        history.push(m);
    }
    let final_test = history.last().and_then(|m| m.test);
    let mut best_val: Option<BestEpoch> = None;
    for m in &history {
        if let Some(v) = m.val {
            if best_val.is_none_or(|b| v.accuracy > b.val_accuracy) {
                best_val = Some(BestEpoch { epoch: m.epoch, val_accuracy: v.accuracy, test: m.test });
            }
        }
    }
    let optimizer_steps = trainer.optimizer_steps();
    Ok(FitOutcome { model: trainer.model, warmup, history, final_test, best_val, optimizer_steps })
}
