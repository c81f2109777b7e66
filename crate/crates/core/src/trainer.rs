//! Cross-entropy training with momentum SGD, step decay, and method hooks.
//!
//! One training step: draw a batch (weighted when resampling), gate encoder
//! features (feed-forward methods), forward, build the objective (objective
//! methods), backpropagate, rescale encoder gradients (gradient modulation),
//! then apply the SGD update. Every stochastic choice draws from a generator
//! derived from `(seed, epoch, batch)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::balance::{
    self, feature_drop, feature_mask, grad_modulation, kl_align_objective, objective_backward,
    resample_weights, unimodal_blend_loss, MethodSpec, Objective,
};
use crate::datagen::{self, Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::fusion::{
    forward_gated, partial_logits, FeatureGate, ForwardCache, FusionGradients, FusionModel,
    HeadKind, ModalityMask,
};
use crate::metrics::{value_function, FlopOp, FlopsLedger};
use crate::numkit::{Matrix, ParamVec};
use crate::seed::{self, stream};

/// Smoothing factor of the running modality scores.
pub const SCORE_SMOOTHING: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set per run by the caller, never read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            step_size: 30,
            gamma: 0.1,
            epochs: 70,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParam(msg.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Max-subtracted softmax of one logit row.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / B`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (rows, h) = logits.shape();
    if rows != labels.len() || rows == 0 {
        return Err(Error::Contract(format!(
            "{rows} logit rows for {} labels",
            labels.len()
        )));
    }
    let mut grad = Matrix::zeros(rows, h);
    let mut loss = 0.0;
    let inv = 1.0 / rows as f64;
    for (r, &y) in labels.iter().enumerate() {
        if y >= h {
            return Err(Error::Contract(format!("label {y} outside 0..{h}")));
        }
        let row = logits.row(r);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        let sum_exp: f64 = row.iter().map(|v| (v - top).exp()).sum();
        let log_z = top + sum_exp.ln();
        loss += log_z - row[y];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *g = (p - if c == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// One momentum-SGD update on flat buffers:
/// `g' = g + wd·p`, `v' = μ·v + g'`, `p' = p − lr·v'`.
pub fn sgd_update(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd over {} params, {} velocities, {} gradients",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Model, optimiser buffers and bookkeeping for one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: FusionModel,
    pub velocity: FusionGradients,
    pub epoch: usize,
    /// Exponentially smoothed modality scores; `None` before the first batch.
    pub running_scores: Option<Vec<f64>>,
    pub flops: FlopsLedger,
}

impl TrainState {
    pub fn new(model: FusionModel) -> Self {
        let velocity = FusionGradients::zeros_like(&model);
        Self {
            model,
            velocity,
            epoch: 0,
            running_scores: None,
            flops: FlopsLedger::new(),
        }
    }

    pub fn sgd_step(
        &mut self,
        grads: &FusionGradients,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        let g = grads.blocks();
        let params = self.model.blocks_mut();
        let vel = self.velocity.blocks_mut();
        if params.len() != g.len() || vel.len() != g.len() {
            return Err(Error::Shape(
                "gradient layout does not match the model".into(),
            ));
        }
        for ((p, v), g) in params.into_iter().zip(vel).zip(g) {
            sgd_update(p, v, g, lr, config.momentum, config.weight_decay)?;
        }
        Ok(())
    }

    /// Scores seen by the hooks: the running average, or uniform before any batch.
    pub fn scores_or_uniform(&self) -> Vec<f64> {
        self.running_scores.clone().unwrap_or_else(|| {
            vec![1.0 / self.model.num_classes() as f64; self.model.num_modalities()]
        })
    }

    fn update_scores(&mut self, scores: &[f64]) {
        self.running_scores = Some(match &self.running_scores {
            None => scores.to_vec(),
            Some(prev) => prev
                .iter()
                .zip(scores)
                .map(|(p, s)| SCORE_SMOOTHING * p + (1.0 - SCORE_SMOOTHING) * s)
                .collect(),
        });
    }
}

/// `lr · gamma^⌊epoch / step_size⌋`
pub fn step_lr(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr * config.gamma.powi((epoch / config.step_size.max(1)) as i32)
}

/// Batch-mean true-class probability under each modality's partial logits.
pub fn modality_scores(
    model: &FusionModel,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<Vec<f64>> {
    if !cache.mask().is_full() {
        return Err(Error::Contract(
            "modality scores need a full-mask forward pass".into(),
        ));
    }
    if labels.len() != cache.batch_size() || labels.is_empty() {
        return Err(Error::Contract(
            "labels do not match the cached batch".into(),
        ));
    }
    (0..model.num_modalities())
        .map(|i| {
            let logits = partial_logits(model, cache, i)?;
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                total += softmax(logits.row(r))?[y];
            }
            Ok(total / labels.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Running modality scores at the end of the epoch; NaN for modalities not trained.
    pub scores: Vec<f64>,
    pub flops_cumulative: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: Option<usize>,
    pub flops: FlopsLedger,
}

impl TrainLog {
    pub fn to_csv(&self, num_modalities: usize) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_acc");
        for i in 1..=num_modalities {
            let _ = write!(out, ",score_{i}");
        }
        out.push_str(",flops_cumulative\n");
        for r in &self.records {
            let _ = write!(out, "{},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.val_acc);
            for s in &r.scores {
                let _ = write!(out, ",{s}");
            }
            let _ = writeln!(out, ",{}", r.flops_cumulative);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: FusionModel,
    pub log: TrainLog,
}

/// Trains on `splits.train`, selecting the epoch with the best validation accuracy
/// (ties keep the earlier epoch).
pub fn fit(
    splits: &Splits,
    model: FusionModel,
    config: &TrainConfig,
    method: &MethodSpec,
) -> Result<FitOutput> {
    let m = model.num_modalities();
    fit_masked(splits, model, config, method, &ModalityMask::full(m))
}

/// As [`fit`], but with some modalities permanently absent; a single-modality
/// mask trains a unimodal model.
pub fn fit_masked(
    splits: &Splits,
    model: FusionModel,
    config: &TrainConfig,
    method: &MethodSpec,
    mask: &ModalityMask,
) -> Result<FitOutput> {
    config.validate()?;
    method.validate()?;
    let m = model.num_modalities();
    if mask.len() != m || mask.count() == 0 {
        return Err(Error::Contract(
            "training mask must select at least one modality".into(),
        ));
    }
    if model.head() != method.head_kind() {
        return Err(Error::Contract(format!(
            "method `{method}` needs head {:?}, model has {:?}",
            method.head_kind(),
            model.head()
        )));
    }
    if !mask.is_full() && *method != MethodSpec::Baseline {
        return Err(Error::Contract(
            "balancing methods need every modality present".into(),
        ));
    }

    let train = &splits.train;
    let mut state = TrainState::new(model);
    let mut best: Option<(f64, usize, FusionModel)> = None;
    let mut log = TrainLog::default();
    let feature_dims: Vec<usize> = (0..m)
        .map(|i| state.model.encoder(i).output_dim())
        .collect();

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let lr = step_lr(config, epoch);
        let weights = match method {
            MethodSpec::Resample { tau } if tau.is_finite() => {
                let w = resample_weights(&state.model, train, *tau)?;
                flops::resample(&mut state.flops, &state.model, train.len());
                Some(w)
            }
            _ => None,
        };
        let order = datagen::batches(
            train.len(),
            config.batch_size,
            seed::derive(config.seed, &[stream::SHUFFLE, epoch as u64]),
            weights.as_ref(),
        )?;

        let mut loss_sum = 0.0;
        for (bi, idx) in order.iter().enumerate() {
            let batch = train.batch(idx);
            let diverged = |loss: f64| Error::Divergence {
                epoch,
                batch: bi,
                loss,
            };
            let loss = match train_step(
                &mut state,
                &batch,
                config,
                method,
                mask,
                &feature_dims,
                lr,
                (epoch, bi),
            ) {
                Ok(loss) => loss,
                Err(Error::Numeric(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if state
                .model
                .blocks()
                .iter()
                .any(|b| b.iter().any(|v| !v.is_finite()))
            {
                return Err(diverged(loss));
            }
            loss_sum += loss * idx.len() as f64;
        }

        let val_acc = match value_function(&state.model, &splits.val, mask) {
            Err(Error::Numeric(_)) => {
                // the last update overflowed the model
                return Err(Error::Divergence {
                    epoch,
                    batch: order.len().saturating_sub(1),
                    loss: f64::NAN,
                });
            }
            other => other?,
        };
        let scores = match &state.running_scores {
            Some(s) if mask.is_full() => s.clone(),
            _ => vec![f64::NAN; m],
        };
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_acc,
            scores,
            flops_cumulative: state.flops.total(),
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, state.model.clone()));
        }
    }

    log.flops = state.flops.clone();
    let model = match best {
        Some((_, epoch, model)) => {
            log.best_epoch = Some(epoch);
            model
        }
        None => state.model,
    };
    Ok(FitOutput { model, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    method: &MethodSpec,
    mask: &ModalityMask,
    feature_dims: &[usize],
    lr: f64,
    (epoch, bi): (usize, usize),
) -> Result<f64> {
    let m = state.model.num_modalities();
    let rows = batch.len();
    let mut hook_rng = seed::rng(config.seed, &[stream::HOOK, epoch as u64, bi as u64]);
    let gates = match *method {
        MethodSpec::FeatureMask { rho_mask } if rho_mask > 0.0 => feature_mask(
            feature_dims,
            rows,
            &state.scores_or_uniform(),
            rho_mask,
            &mut hook_rng,
        )?,
        MethodSpec::FeatureDrop { p_max } if p_max > 0.0 => feature_drop(
            feature_dims,
            rows,
            &state.scores_or_uniform(),
            p_max,
            &mut hook_rng,
        )?,
        _ => FeatureGate::identity(m),
    };

    let cache = forward_gated(&state.model, batch, mask, &gates)?;
    flops::forward(&mut state.flops, &state.model, rows, mask, &gates);
    if mask.is_full() {
        let scores = modality_scores(&state.model, &cache, &batch.labels)?;
        state.update_scores(&scores);
        if method.uses_scores() && method.is_active() {
            flops::scores(&mut state.flops, &state.model, rows);
        }
    }

    let objective = match *method {
        MethodSpec::UnimodalBlend { w_uni } => {
            unimodal_blend_loss(&state.model, &cache, &batch.labels, w_uni)?
        }
        MethodSpec::KlAlign { lambda } => {
            kl_align_objective(&state.model, &cache, &batch.labels, lambda)?
        }
        _ => {
            let (loss, grad) = cross_entropy(cache.logits(), &batch.labels)?;
            Objective::plain(loss, grad, m)
        }
    };
    if !objective.loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            batch: bi,
            loss: objective.loss,
        });
    }
    flops::objective(&mut state.flops, &state.model, rows, method);

    let mut grads = objective_backward(&state.model, &cache, &objective)?;
    flops::backward(
        &mut state.flops,
        &state.model,
        rows,
        mask,
        &gates,
        &objective,
    );

    if let MethodSpec::GradModulation { alpha } = *method {
        if alpha > 0.0 {
            let kappa = grad_modulation(&state.scores_or_uniform(), alpha)?;
            for (g, k) in grads.encoders.iter_mut().zip(&kappa) {
                if *k != 1.0 {
                    g.scale(*k);
                }
            }
            let enc: usize = grads.encoders.iter().map(ParamVec::num_params).sum();
            state.flops.record(FlopOp::Elementwise { n: enc });
        }
    }

    state.sgd_step(&grads, lr, config)?;
    state.flops.record(FlopOp::Elementwise {
        n: 6 * state.model.num_params(),
    });
    Ok(objective.loss)
}

/// FLOP accounting for the training step; conventions live on [`FlopOp`].
mod flops {
    use super::*;

    fn encoder_forward(ledger: &mut FlopsLedger, sizes: &[usize], rows: usize) {
        let depth = sizes.len() - 1;
        for (t, w) in sizes.windows(2).enumerate() {
            ledger.record(FlopOp::MatmulForward {
                p: rows,
                q: w[0],
                r: w[1],
                bias: true,
            });
            if t + 1 < depth {
                ledger.record(FlopOp::Elementwise { n: rows * w[1] });
            }
        }
    }

    fn head_forward(ledger: &mut FlopsLedger, model: &FusionModel, d: usize, rows: usize) {
        let h = model.num_classes();
        ledger.record(FlopOp::MatmulForward {
            p: rows,
            q: d,
            r: h,
            bias: false,
        });
        if let HeadKind::Cosine { .. } = model.head() {
            // norms plus normalisation of every logit
            ledger.record(FlopOp::Elementwise {
                n: 2 * (rows + h) * d + 3 * rows * h,
            });
        }
        // accumulate into the fused logits
        ledger.record(FlopOp::Elementwise { n: rows * h });
    }

    pub(super) fn forward(
        ledger: &mut FlopsLedger,
        model: &FusionModel,
        rows: usize,
        mask: &ModalityMask,
        gates: &FeatureGate,
    ) {
        for i in 0..model.num_modalities() {
            if !mask.is_present(i) {
                continue;
            }
            let sizes = model.encoder(i).sizes();
            encoder_forward(ledger, &sizes, rows);
            if gates.get(i).is_some() {
                ledger.record(FlopOp::Elementwise {
                    n: rows * sizes[sizes.len() - 1],
                });
            }
            head_forward(ledger, model, sizes[sizes.len() - 1], rows);
        }
        if model.head() == HeadKind::Linear {
            ledger.record(FlopOp::Elementwise {
                n: rows * model.num_classes(),
            });
        }
    }

    pub(super) fn scores(ledger: &mut FlopsLedger, model: &FusionModel, rows: usize) {
        let h = model.num_classes();
        for _ in 0..model.num_modalities() {
            ledger.record(FlopOp::SoftmaxLoss { rows, classes: h });
        }
    }

    pub(super) fn objective(
        ledger: &mut FlopsLedger,
        model: &FusionModel,
        rows: usize,
        method: &MethodSpec,
    ) {
        let h = model.num_classes();
        let m = model.num_modalities();
        ledger.record(FlopOp::SoftmaxLoss { rows, classes: h });
        match *method {
            MethodSpec::UnimodalBlend { w_uni } if w_uni != 0.0 => {
                for _ in 0..m {
                    ledger.record(FlopOp::Elementwise { n: rows * h });
                    ledger.record(FlopOp::SoftmaxLoss { rows, classes: h });
                }
            }
            MethodSpec::KlAlign { lambda } if lambda != 0.0 => {
                for _ in 0..m {
                    ledger.record(FlopOp::Elementwise { n: rows * h });
                    ledger.record(FlopOp::SoftmaxLoss { rows, classes: h });
                }
                let pairs = m * (m - 1) / 2;
                ledger.record(FlopOp::Elementwise {
                    n: 12 * pairs * rows * h,
                });
            }
            _ => {}
        }
    }

    pub(super) fn backward(
        ledger: &mut FlopsLedger,
        model: &FusionModel,
        rows: usize,
        mask: &ModalityMask,
        gates: &FeatureGate,
        objective: &Objective,
    ) {
        let h = model.num_classes();
        for i in 0..model.num_modalities() {
            if !mask.is_present(i) {
                continue;
            }
            let sizes = model.encoder(i).sizes();
            let d = sizes[sizes.len() - 1];
            let terms = 1 + usize::from(objective.partial.get(i).is_some_and(Option::is_some));
            for _ in 0..terms {
                ledger.record(FlopOp::MatmulBackward {
                    p: rows,
                    q: d,
                    r: h,
                });
                if let HeadKind::Cosine { .. } = model.head() {
                    ledger.record(FlopOp::Elementwise {
                        n: 4 * rows * h * d,
                    });
                }
            }
            if terms > 1 {
                // combine, plus the conflict projection on the head block
                ledger.record(FlopOp::Elementwise {
                    n: rows * d + h * d,
                });
                if objective.project_conflicts {
                    ledger.record(FlopOp::Elementwise { n: 6 * h * d });
                }
            }
            if gates.get(i).is_some() {
                ledger.record(FlopOp::Elementwise { n: rows * d });
            }
            let depth = sizes.len() - 1;
            for (t, w) in sizes.windows(2).enumerate().rev() {
                ledger.record(FlopOp::MatmulBackward {
                    p: rows,
                    q: w[0],
                    r: w[1],
                });
                ledger.record(FlopOp::Elementwise { n: rows * w[1] });
                if t > 0 && t < depth {
                    ledger.record(FlopOp::Elementwise { n: rows * w[0] });
                }
            }
        }
        if model.head() == HeadKind::Linear {
            ledger.record(FlopOp::Elementwise { n: rows * h });
        }
    }

    pub(super) fn resample(ledger: &mut FlopsLedger, model: &FusionModel, n: usize) {
        let m = model.num_modalities();
        forward(
            ledger,
            model,
            n,
            &ModalityMask::full(m),
            &FeatureGate::identity(m),
        );
        scores(ledger, model, n);
    }
}

/// Evaluates the objective of `method` on one batch without hooks or updates.
pub fn batch_objective(model: &FusionModel, batch: &Batch, method: &MethodSpec) -> Result<f64> {
    let m = model.num_modalities();
    let cache = forward_gated(
        model,
        batch,
        &ModalityMask::full(m),
        &FeatureGate::identity(m),
    )?;
    Ok(match *method {
        MethodSpec::UnimodalBlend { w_uni } => {
            unimodal_blend_loss(model, &cache, &batch.labels, w_uni)?.loss
        }
        MethodSpec::KlAlign { lambda } => {
            kl_align_objective(model, &cache, &batch.labels, lambda)?.loss
        }
        _ => cross_entropy(cache.logits(), &batch.labels)?.0,
    })
}

/// Objective value and its exact analytic gradient on one batch: hooks off and
/// the blend conflict guard disabled, so the result is a true loss gradient.
pub fn batch_gradients(
    model: &FusionModel,
    batch: &Batch,
    method: &MethodSpec,
) -> Result<(f64, FusionGradients)> {
    let m = model.num_modalities();
    let cache = forward_gated(
        model,
        batch,
        &ModalityMask::full(m),
        &FeatureGate::identity(m),
    )?;
    let mut obj = match *method {
        MethodSpec::UnimodalBlend { w_uni } => {
            unimodal_blend_loss(model, &cache, &batch.labels, w_uni)?
        }
        MethodSpec::KlAlign { lambda } => kl_align_objective(model, &cache, &batch.labels, lambda)?,
        _ => {
            let (loss, grad) = cross_entropy(cache.logits(), &batch.labels)?;
            Objective::plain(loss, grad, m)
        }
    };
    obj.project_conflicts = false;
    let grads = balance::objective_backward(model, &cache, &obj)?;
    Ok((obj.loss, grads))
}

/// Trains a model that only ever sees modality `modality`, with the same
/// budget as a full run.
pub fn fit_unimodal(
    splits: &Splits,
    model: FusionModel,
    config: &TrainConfig,
    modality: usize,
) -> Result<FitOutput> {
    let m = model.num_modalities();
    fit_masked(
        splits,
        model,
        config,
        &MethodSpec::Baseline,
        &ModalityMask::only(m, modality),
    )
}

/// Accuracy of a unimodal model on `data`.
pub fn unimodal_accuracy(model: &FusionModel, data: &Dataset, modality: usize) -> Result<f64> {
    value_function(
        model,
        data,
        &ModalityMask::only(model.num_modalities(), modality),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        for p in softmax(&[1.0, 1.0, 1.0]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, g) = cross_entropy(&Matrix::zeros(1, 2), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);

        let logits = Matrix::new(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, g) = cross_entropy(&logits, &[0, 0]).unwrap();
        assert_eq!(g.row(0), &[-0.25, 0.25]);

        let (_, g) =
            cross_entropy(&Matrix::new(1, 2, vec![2f64.ln(), 0.0]).unwrap(), &[1]).unwrap();
        assert!((g.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.get(0, 1) + 2.0 / 3.0).abs() < 1e-15);

        let (loss, _) =
            cross_entropy(&Matrix::new(1, 2, vec![60.0, -60.0]).unwrap(), &[0]).unwrap();
        assert!(loss < 1e-50);
        assert!(matches!(
            cross_entropy(&Matrix::zeros(1, 2), &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sgd_examples() {
        let (mut p, mut v) = (vec![1.0], vec![0.0]);
        sgd_update(&mut p, &mut v, &[1.0], 0.1, 0.0, 0.1).unwrap();
        assert!((p[0] - 0.89).abs() < 1e-15);

        let (mut p, mut v) = (vec![0.5, -2.0], vec![0.0, 0.0]);
        sgd_update(&mut p, &mut v, &[0.0, 0.0], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);

        let (mut p, mut v) = (vec![0.5], vec![0.0]);
        sgd_update(&mut p, &mut v, &[2.0], 0.25, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![0.5 - 0.25 * 2.0]);
        assert!(matches!(
            sgd_update(&mut p, &mut v, &[1.0, 2.0], 0.1, 0.0, 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn step_lr_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(step_lr(&cfg, 0), 1e-3);
        assert!((step_lr(&cfg, 29) - 1e-3).abs() < 1e-18);
        assert!((step_lr(&cfg, 30) - 1e-4).abs() < 1e-18);
        assert!((step_lr(&cfg, 65) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                gamma: 0.0,
                ..Default::default()
            },
            TrainConfig {
                gamma: 1.5,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
