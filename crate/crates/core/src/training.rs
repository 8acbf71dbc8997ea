//! Three-term loss, optimization loop with plateau learning-rate control,
//! and best-checkpoint retention.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::cvae::kl_divergence;
use crate::data::TrajectoryWindow;
use crate::decoder::CoordinateScales;
use crate::error::{Error, Result};
use crate::goals::GoalSet;
use crate::model::{Batch, ForwardOutput, LatentMode, Mgnet};
use crate::nn::{scalar_f64, Ctx};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pred: f64,
    pub l_goals: f64,
    pub kld: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_components(l_pred: f64, l_goals: f64, kld: f64) -> Self {
        Self {
            l_pred,
            l_goals,
            kld,
            total: l_pred + l_goals + kld,
        }
    }
}

/// Mean over batch and steps of the squared L2 distance between rows.
pub fn loss_pred(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok((pred - truth)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Mean over batch and goals of the squared L2 distance to the targets.
pub fn loss_goals(goals: &GoalSet, targets: &Tensor, target_times: &[usize]) -> Result<Tensor> {
    if goals.times != target_times {
        return Err(Error::Mismatch(format!(
            "goal times {:?} do not match supervision times {:?}",
            goals.times, target_times
        )));
    }
    loss_pred(&goals.goals, targets)
}

/// Batch mean of the summed-over-dimensions KL divergence.
pub fn kld_loss(out: &ForwardOutput) -> Result<Tensor> {
    match &out.posterior {
        Some(q) => Ok(kl_divergence(q, &out.prior)?.mean_all()?),
        None => Ok(out.pred.zeros_like()?.sum_all()?),
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_pred: Tensor,
    pub l_goals: Tensor,
    pub kld: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn report(&self) -> Result<LossReport> {
        Ok(LossReport::from_components(
            scalar_f64(&self.l_pred)?,
            scalar_f64(&self.l_goals)?,
            scalar_f64(&self.kld)?,
        ))
    }
}

/// Unit-weight sum of the three terms.
pub fn total_loss(l_pred: &Tensor, l_goals: &Tensor, kld: &Tensor) -> Result<Tensor> {
    Ok(((l_pred + l_goals)? + kld)?)
}

/// All loss terms for one forward pass. With `coarse_aux` the coarse stage
/// features are additionally supervised at their boundaries, folded into
/// `l_goals`.
pub fn compute_losses(out: &ForwardOutput, batch: &Batch, coarse_aux: bool) -> Result<LossTerms> {
    let l_pred = loss_pred(&out.pred, &batch.future)?;
    let mut l_goals = loss_goals(&out.goals, &batch.goal_targets, &batch.goal_times)?;
    if coarse_aux {
        if let Some(c) = &out.coarse_goals {
            let idx: Vec<u32> = c.times.iter().map(|&t| (t - 1) as u32).collect();
            let idx = Tensor::new(idx.as_slice(), batch.future.device())?;
            let targets = batch.future.index_select(&idx, 1)?;
            l_goals = (l_goals + loss_pred(&c.goals, &targets)?)?;
        }
    }
    let kld = kld_loss(out)?;
    let total = total_loss(&l_pred, &l_goals, &kld)?;
    Ok(LossTerms {
        l_pred,
        l_goals,
        kld,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub coarse_goal_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            epochs: 100,
            plateau_factor: 0.5,
            plateau_patience: 5,
            seed: 0,
            dropout: 0.1,
            grad_clip: Some(1.0),
            coarse_goal_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("plateau factor must lie in (0, 1]".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Reduces the learning rate by `factor` once the monitored loss has failed
/// to improve for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_pred: f64,
    pub l_goals: f64,
    pub kld: f64,
    pub total: f64,
    pub val_total: f64,
}

pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Snapshot with the lowest validation loss; already loaded into the model.
    pub best: Checkpoint,
}

/// Root-mean-square magnitude of future positions and per-step displacements
/// over normalized windows, falling back to 1 for degenerate data.
pub fn estimate_scales(windows: &[TrajectoryWindow]) -> CoordinateScales {
    let (mut pos, mut delta, mut n_pos, mut n_delta) = (0.0, 0.0, 0usize, 0usize);
    for w in windows {
        let mut prev = w.observed.last().copied().unwrap_or([0.0; 4]);
        for row in &w.future {
            for c in 0..4 {
                pos += row[c] * row[c];
                let d = row[c] - prev[c];
                delta += d * d;
            }
            n_pos += 4;
            n_delta += 4;
            prev = *row;
        }
    }
    let rms = |s: f64, n: usize| {
        let v = if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
        if v.is_finite() && v > 1e-12 {
            v
        } else {
            1.0
        }
    };
    CoordinateScales {
        position: rms(pos, n_pos),
        delta: rms(delta, n_delta),
    }
}

/// Scales every gradient by `min(1, max_norm / ‖g‖)` using the global norm;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += scalar_f64(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.get(v) {
                let scaled = g.affine(s, 0.0)?;
                grads.insert(v, scaled);
            }
        }
    }
    Ok(norm)
}

/// Weighted average of losses over `windows` in eval mode with prior-mean
/// decoding.
pub fn validation_loss(
    model: &Mgnet,
    windows: &[TrajectoryWindow],
    batch_size: usize,
) -> Result<LossReport> {
    let mut ctx = Ctx::eval();
    let (mut acc, mut n) = ([0.0; 3], 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = Batch::from_windows(chunk, model.goal_count(), model.dtype())?;
        let out = model.forward(&batch.observed, Some(&batch.future), LatentMode::PriorMean, &mut ctx)?;
        let r = compute_losses(&out, &batch, false)?.report()?;
        for (a, v) in acc.iter_mut().zip([r.l_pred, r.l_goals, r.kld]) {
            *a += v * chunk.len() as f64;
        }
        n += chunk.len();
    }
    if n == 0 {
        return Err(Error::Config("validation split is empty".into()));
    }
    let n = n as f64;
    Ok(LossReport::from_components(acc[0] / n, acc[1] / n, acc[2] / n))
}

pub fn fit(
    model: &mut Mgnet,
    train: &[TrajectoryWindow],
    val: &[TrajectoryWindow],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    model.set_scales(estimate_scales(train));
    let vars = model.store().all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx = Ctx::train(cfg.seed.wrapping_add(1), cfg.dropout);
    let k = model.goal_count();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut acc, mut seen) = ([0.0; 3], 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_windows(idx.iter().map(|&i| &train[i]), k, model.dtype())?;
            let out = model.forward(&batch.observed, Some(&batch.future), LatentMode::Posterior, &mut ctx)?;
            let terms = compute_losses(&out, &batch, cfg.coarse_goal_loss)?;
            let r = terms.report()?;
            if !r.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (l_pred {}, l_goals {}, kld {})",
                    r.l_pred, r.l_goals, r.kld
                )));
            }
            let mut grads = terms.total.backward()?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, &vars, c)?;
            }
            opt.step(&grads)?;
            for (a, v) in acc.iter_mut().zip([r.l_pred, r.l_goals, r.kld]) {
                *a += v * idx.len() as f64;
            }
            seen += idx.len();
        }
        let n = seen as f64;
        let train_report = LossReport::from_components(acc[0] / n, acc[1] / n, acc[2] / n);
        let val_report = validation_loss(model, val, cfg.batch_size)?;
        if !val_report.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            lr: sched.lr(),
            l_pred: train_report.l_pred,
            l_goals: train_report.l_goals,
            kld: train_report.kld,
            total: train_report.total,
            val_total: val_report.total,
        };
        log::info!(
            "epoch {epoch}: lr {:.2e} train {:.6} val {:.6}",
            record.lr,
            record.total,
            record.val_total
        );
        observer(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| val_report.total < b.meta.val_loss.unwrap_or(f64::INFINITY)) {
            best = Some(Checkpoint::from_model(
                model,
                epoch,
                Some(val_report.total),
                Some(cfg.clone()),
                Some(RngState::of(ctx.rng())),
            )?);
        }
        opt.set_learning_rate(sched.step(val_report.total));
    }
    let best = best.ok_or_else(|| Error::Config("training needs at least one epoch".into()))?;
    best.load_into(model)?;
    Ok(FitOutcome { history, best })
}

/// Gradient norm of every learnable tensor after one backward pass of the
/// training loss on `batch`.
pub fn gradient_norms(model: &Mgnet, batch: &Batch, seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut ctx = Ctx::train(seed, 0.0);
    let out = model.forward(&batch.observed, Some(&batch.future), LatentMode::Posterior, &mut ctx)?;
    let grads = compute_losses(&out, batch, false)?.total.backward()?;
    let mut norms = BTreeMap::new();
    for (name, var) in model.store().vars() {
        let n = match grads.get(var) {
            Some(g) => scalar_f64(&g.sqr()?.sum_all()?)?.sqrt(),
            None => 0.0,
        };
        norms.insert(name.clone(), n);
    }
    Ok(norms)
}
