//! Mini-batch training: Adam, plateau learning-rate schedule, early stopping,
//! and cross-validation orchestration.
//!
//! A training run is fully determined by (model, data, fold, weights, config,
//! seed): batch order comes from a per-epoch shuffle substream, dropout masks
//! from per-batch substreams, and all arithmetic is f64, so identical inputs
//! reproduce bit-identical histories and parameters.
//!
//! Stain labels are consumed through the dataset's audited accessor and only
//! when the active loss actually needs them (supervised stain mode). Entropy
//! and label-free runs never touch stain labels anywhere in this module's
//! training path, which the per-run read counter in the history makes
//! checkable after the fact.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::metrics::{
    binary_metrics, multiclass_metrics, uncertainty_summary, MetricReport, MetricsError,
    UncertaintySummary,
};
use crate::model::{Model, ModelError, ModelKind, STAIN_CLASSES};
use crate::objectives::{combined_loss_from_logits, LossError, LossWeights, StainMode};
use crate::rng::{derive_seed, stream, substream};
use crate::synth::Dataset;
use crate::synth::SplitPlan;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::layers::{ExecCtx, ParamBinds};

/// Rows evaluated per tape during validation and test passes. Part of the
/// deterministic RNG layout for MC evaluation: changing it regroups dropout
/// draws across samples (statistics are unaffected).
pub const EVAL_CHUNK: usize = 256;

/// Errors from the training engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("fold {fold} outside plan with {n_folds} folds")]
    NoSuchFold { fold: usize, n_folds: usize },
    #[error("fold {fold} has an empty {part} partition")]
    EmptyFold { fold: usize, part: &'static str },
    #[error("held-out test set is empty")]
    EmptyTest,
    #[error("non-finite gradient in parameter {param} at epoch {epoch}")]
    NonFiniteGrad { param: String, epoch: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("bad training config: {0}")]
    BadConfig(&'static str),
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub min_lr: f64,
    /// Decrease in validation loss that counts as an improvement, for both
    /// the scheduler and early stopping.
    pub improvement_tol: f64,
    /// Stochastic forward passes per sample in MC test evaluation.
    pub mc_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 7,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler_factor: 0.5,
            scheduler_patience: 3,
            min_lr: 1e-5,
            improvement_tol: 1e-4,
            mc_passes: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max_epochs must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::BadConfig("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::BadConfig("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::BadConfig("eps must be positive"));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return Err(TrainError::BadConfig("scheduler_factor must lie in (0, 1)"));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return Err(TrainError::BadConfig("min_lr must lie in (0, lr]"));
        }
        if self.mc_passes == 0 {
            return Err(TrainError::BadConfig("mc_passes must be positive"));
        }
        Ok(())
    }
}

/// Adam optimizer state: step count plus first and second moment buffers
/// aligned with the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn for_model(model: &Model, config: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self::new(config.lr, config.beta1, config.beta2, config.eps, &sizes)
    }
}

/// One bias-corrected Adam update. Parameters without an accumulated gradient
/// are treated as having a zero gradient; with zero-initialized moments they
/// stay bitwise unchanged, which keeps unused heads exactly frozen.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    names: &[String],
    epoch: usize,
) -> Result<(), TrainError> {
    debug_assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    for (pi, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        match p.grad() {
            None => {
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= state.beta1;
                    *vi *= state.beta2;
                }
            }
            Some(g) => {
                if g.iter().any(|x| !x.is_finite()) {
                    let param = names
                        .get(pi)
                        .cloned()
                        .unwrap_or_else(|| format!("param[{pi}]"));
                    return Err(TrainError::NonFiniteGrad { param, epoch });
                }
                let g: Vec<f64> = g.to_vec();
                for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                    *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
                    *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
                }
            }
        }
        for ((x, &mi), &vi) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *x -= state.lr * mhat / (libm::sqrt(vhat) + state.eps);
        }
    }
    Ok(())
}

/// Halves the learning rate after too many epochs without improvement,
/// never below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience_epochs: usize,
    pub min_lr: f64,
    pub improvement_tol: f64,
    pub lr: f64,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: &TrainConfig) -> Self {
        Self {
            factor: config.scheduler_factor,
            patience_epochs: config.scheduler_patience,
            min_lr: config.min_lr,
            improvement_tol: config.improvement_tol,
            lr,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the learning rate for the
    /// next epoch. Reduces once the count of consecutive non-improvements
    /// exceeds the patience, then restarts the count.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best_val_loss - self.improvement_tol {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement > self.patience_epochs {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.lr
    }
}

/// Stops training once the count of consecutive non-improving epochs exceeds
/// the patience, or at `max_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub max_epochs: usize,
    pub improvement_tol: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stopped: bool,
    consecutive: usize,
}

impl EarlyStop {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            patience: config.early_stop_patience,
            max_epochs: config.max_epochs,
            improvement_tol: config.improvement_tol,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            stopped: false,
            consecutive: 0,
        }
    }

    /// Feeds one epoch's validation loss (`epoch` is 1-based). Returns true
    /// when this epoch is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss - self.improvement_tol {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.consecutive = 0;
            true
        } else {
            self.consecutive += 1;
            if self.consecutive > self.patience {
                self.stopped = true;
            }
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.stopped || epoch >= self.max_epochs
    }
}

/// One epoch's bookkeeping. Optional fields are absent when the model has no
/// lesion head or the run's loss mode does not read stain labels.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Combined objective on the validation fold (the quantity that drives
    /// the scheduler and early stopping).
    pub val_loss: f64,
    pub val_lesion_ce: Option<f64>,
    pub val_stain_ce: Option<f64>,
    pub val_stain_entropy: f64,
    pub val_lesion_acc: Option<f64>,
    pub val_stain_acc: Option<f64>,
    pub lr: f64,
    /// L2 norm of the stain head's output-layer weights, tracked to make
    /// head freezing and un-learning visible across epochs.
    pub stain_weight_norm: f64,
}

/// Full record of one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHistory {
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Stain-label reads this run performed through the audited accessor.
    pub stain_label_reads: u64,
}

/// Train/validation patch indices for one fold of the plan. Training takes
/// every dev group outside the fold; validation is the fold itself.
pub fn fold_indices(
    data: &Dataset,
    plan: &SplitPlan,
    fold: usize,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if fold >= plan.n_folds {
        return Err(TrainError::NoSuchFold { fold, n_folds: plan.n_folds });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..data.len() {
        match plan.fold_of(data.group(i)) {
            Some(f) if f == fold => val.push(i),
            Some(_) => train.push(i),
            None => {}
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyFold { fold, part: "train" });
    }
    if val.is_empty() {
        return Err(TrainError::EmptyFold { fold, part: "validation" });
    }
    Ok((train, val))
}

/// Indices of held-out test patches.
pub fn test_indices(data: &Dataset, plan: &SplitPlan) -> Vec<usize> {
    (0..data.len()).filter(|&i| plan.is_test(data.group(i))).collect()
}

/// Batch of patches as an `[n, C, H, W]` tensor (f32 storage widened to f64).
pub fn batch_tensor(data: &Dataset, idx: &[usize]) -> Result<Tensor, TensorError> {
    let (c, h, w) = data.shape();
    let mut values = Vec::with_capacity(idx.len() * c * h * w);
    for &i in idx {
        values.extend(data.pixels(i).iter().map(|&v| v as f64));
    }
    Tensor::from_vec(values, &[idx.len(), c, h, w])
}

/// Deterministic evaluation of the objective and quick metrics on a set of
/// patches, in fixed chunks. `counted` routes stain-label reads through the
/// audited accessor (used inside training); evaluation after training passes
/// false.
pub struct EvalStats {
    pub n: usize,
    pub objective: f64,
    pub lesion_ce: Option<f64>,
    pub stain_ce: Option<f64>,
    pub stain_entropy: f64,
    pub lesion_acc: Option<f64>,
    pub stain_acc: Option<f64>,
}

pub fn evaluate_split(
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    weights: &LossWeights,
    counted: bool,
) -> Result<EvalStats, TrainError> {
    let needs_stain_labels =
        model.kind() == ModelKind::StainOnly || weights.reads_stain_labels();
    let mut n = 0usize;
    let mut lesion_ce_sum = 0.0;
    let mut stain_ce_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut lesion_hits = 0usize;
    let mut stain_hits = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = batch_tensor(data, chunk)?;
        let (lesion_probs, stain_probs) = model.predict_probs(&x)?;
        let rows = chunk.len();
        n += rows;

        let mut tape = Tape::new();
        let sp = tape.constant(&stain_probs, &[rows, STAIN_CLASSES])?;
        let h = tape.entropy_mean(sp);
        entropy_sum += tape.scalar_value(h) * rows as f64;
        if needs_stain_labels {
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| if counted { data.stain_counted(i) } else { data.stain_uncounted(i) })
                .collect();
            let ce = tape.nll_mean(sp, &labels)?;
            stain_ce_sum += tape.scalar_value(ce) * rows as f64;
            for (r, &label) in labels.iter().enumerate() {
                let row = &stain_probs[r * STAIN_CLASSES..(r + 1) * STAIN_CLASSES];
                if crate::metrics::argmax(row) == label {
                    stain_hits += 1;
                }
            }
        }
        if let Some(lp) = lesion_probs {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.lesion(i)).collect();
            let lv = tape.constant(&lp, &[rows, 2])?;
            let ce = tape.nll_mean(lv, &labels)?;
            lesion_ce_sum += tape.scalar_value(ce) * rows as f64;
            for (r, &label) in labels.iter().enumerate() {
                if crate::metrics::argmax(&lp[r * 2..(r + 1) * 2]) == label {
                    lesion_hits += 1;
                }
            }
        }
    }
    let nf = n as f64;
    let has_lesion = model.kind() == ModelKind::Dual;
    let lesion_ce = has_lesion.then(|| lesion_ce_sum / nf);
    let stain_ce = needs_stain_labels.then(|| stain_ce_sum / nf);
    let stain_entropy = entropy_sum / nf;
    let objective = match model.kind() {
        ModelKind::StainOnly => stain_ce.expect("stain-only evaluation computes stain ce"),
        ModelKind::Dual => {
            let stain_term = match weights.stain_mode {
                StainMode::SupervisedCe if weights.mu2 != 0.0 => {
                    stain_ce.expect("supervised mode computes stain ce")
                }
                StainMode::EntropyMax if weights.mu2 != 0.0 => stain_entropy,
                _ => 0.0,
            };
            weights.mu1 * lesion_ce.expect("dual evaluation computes lesion ce")
                + weights.mu2 * stain_term
        }
    };
    if !objective.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0 });
    }
    Ok(EvalStats {
        n,
        objective,
        lesion_ce,
        stain_ce,
        stain_entropy,
        lesion_acc: has_lesion.then(|| lesion_hits as f64 / nf),
        stain_acc: needs_stain_labels.then(|| stain_hits as f64 / nf),
    })
}

/// Trains one model on the dev folds outside `fold`, validating on `fold`.
/// Returns the parameter snapshot from the best epoch together with the full
/// history.
pub fn train(
    mut model: Model,
    data: &Dataset,
    plan: &SplitPlan,
    fold: usize,
    weights: &LossWeights,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainHistory), TrainError> {
    config.validate()?;
    weights.validate()?;
    if model.kind() == ModelKind::StainOnly && weights.stain_mode != StainMode::SupervisedCe {
        return Err(TrainError::BadConfig(
            "a stain-only model trains with the supervised stain loss",
        ));
    }
    let (mut train_idx, val_idx) = fold_indices(data, plan, fold)?;
    let supervised_stain = weights.reads_stain_labels();

    let names = model.param_names();
    let mut adam = AdamState::for_model(&model, config);
    let mut scheduler = PlateauScheduler::new(config.lr, config);
    let mut early = EarlyStop::new(config);
    let mut best_params: Vec<Vec<f64>> =
        model.params().iter().map(|p| p.data().to_vec()).collect();
    let mut history = TrainHistory {
        fold,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        stain_label_reads: 0,
    };

    for epoch in 1..=config.max_epochs {
        let mut shuffle_rng = substream(seed, &[stream::SHUFFLE, epoch as u64]);
        shuffle(&mut train_idx, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in train_idx.chunks(config.batch_size).enumerate() {
            let x = batch_tensor(data, batch)?;
            let lesion_labels: Vec<usize> = batch.iter().map(|&i| data.lesion(i)).collect();
            let stain_labels: Option<Vec<usize>> = if model.kind() == ModelKind::StainOnly
                || supervised_stain
            {
                history.stain_label_reads += batch.len() as u64;
                Some(batch.iter().map(|&i| data.stain_counted(i)).collect())
            } else {
                None
            };

            let mut tape = Tape::new();
            let dropout_rng =
                substream(seed, &[stream::DROPOUT, epoch as u64, batch_no as u64]);
            let mut ctx = ExecCtx::stochastic(dropout_rng).recording();
            let mut binds = ParamBinds::new();
            let xv = tape.leaf_detached(&x);
            let out = model.forward(&mut tape, &mut ctx, &mut binds, xv)?;
            let loss = match out.lesion_logits {
                Some(logits) => combined_loss_from_logits(
                    &mut tape,
                    logits,
                    &lesion_labels,
                    out.stain_logits,
                    stain_labels.as_deref(),
                    weights,
                )?,
                None => tape.ce_mean(
                    out.stain_logits,
                    stain_labels.as_deref().expect("stain-only training reads stain labels"),
                )?,
            };
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_sum += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &binds);
            let mut params = model.params_mut();
            adam_step(&mut adam, &mut params, &names, epoch)?;
            model.clear_grads();
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let stats = evaluate_split(&model, data, &val_idx, weights, true)?;
        if supervised_stain {
            history.stain_label_reads += val_idx.len() as u64;
        }
        let improved = early.observe(epoch, stats.objective);
        if improved {
            for (dst, p) in best_params.iter_mut().zip(model.params()) {
                dst.copy_from_slice(p.data());
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: stats.objective,
            val_lesion_ce: stats.lesion_ce,
            val_stain_ce: stats.stain_ce,
            val_stain_entropy: stats.stain_entropy,
            val_lesion_acc: stats.lesion_acc,
            val_stain_acc: stats.stain_acc,
            lr: adam.lr,
            stain_weight_norm: model.stain_head().output_weight_norm(),
        });
        adam.lr = scheduler.observe(stats.objective);
        if early.should_stop(epoch) {
            break;
        }
    }

    history.best_epoch = early.best_epoch;
    history.best_val_loss = early.best_val_loss;
    history.stopped_early = early.stopped;
    if early.best_epoch > 0 {
        for (src, p) in best_params.iter().zip(model.params_mut()) {
            p.data_mut().copy_from_slice(src);
        }
    }
    Ok((model, history))
}


fn shuffle<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Outcome of one fold: its history plus MC-dropout test metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldOutcome {
    pub fold: usize,
    pub history: TrainHistory,
    pub lesion_test: Option<MetricReport>,
    pub stain_test: MetricReport,
    pub lesion_uncertainty: Option<UncertaintySummary>,
    pub stain_uncertainty: UncertaintySummary,
}

/// Trains one model per fold from the factory and evaluates each on the
/// held-out test groups with MC dropout.
pub fn run_cv(
    model_factory: &dyn Fn(usize) -> Result<Model, ModelError>,
    data: &Dataset,
    plan: &SplitPlan,
    weights: &LossWeights,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<FoldOutcome>, TrainError> {
    let test_idx = test_indices(data, plan);
    if test_idx.is_empty() {
        return Err(TrainError::EmptyTest);
    }
    let mut outcomes = Vec::with_capacity(plan.n_folds);
    for fold in 0..plan.n_folds {
        let model = model_factory(fold)?;
        let fold_seed = derive_seed(seed, &[fold as u64]);
        let (model, history) = train(model, data, plan, fold, weights, config, fold_seed)?;
        let eval_seed = derive_seed(seed, &[stream::MC_PASS, fold as u64]);
        let outcome = evaluate_test(&model, data, &test_idx, config, eval_seed, fold, history)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// MC-dropout evaluation of one trained model on the test patches.
pub fn evaluate_test(
    model: &Model,
    data: &Dataset,
    test_idx: &[usize],
    config: &TrainConfig,
    eval_seed: u64,
    fold: usize,
    history: TrainHistory,
) -> Result<FoldOutcome, TrainError> {
    let mut lesion_preds = Vec::new();
    let mut stain_preds = Vec::new();
    for (chunk_no, chunk) in test_idx.chunks(EVAL_CHUNK).enumerate() {
        let x = batch_tensor(data, chunk)?;
        let chunk_seed = derive_seed(eval_seed, &[chunk_no as u64]);
        let batch = model.mc_predict_batch(&x, config.mc_passes, chunk_seed)?;
        if let Some(l) = batch.lesion {
            lesion_preds.extend(l);
        }
        stain_preds.extend(batch.stain);
    }
    let lesion_labels: Vec<usize> = test_idx.iter().map(|&i| data.lesion(i)).collect();
    let stain_labels: Vec<usize> =
        test_idx.iter().map(|&i| data.stain_uncounted(i)).collect();

    let stain_probs: Vec<f64> = stain_preds
        .iter()
        .flat_map(|p| p.mean_probs.iter().copied())
        .collect();
    let stain_uncertainty = uncertainty_summary(&stain_preds, &stain_labels)?;
    let stain_test = multiclass_metrics(&stain_probs, STAIN_CLASSES, &stain_labels)?
        .with_mean_uncertainty(stain_uncertainty.mean);

    let (lesion_test, lesion_uncertainty) = if lesion_preds.is_empty() {
        (None, None)
    } else {
        let scores: Vec<f64> = lesion_preds.iter().map(|p| p.mean_probs[1]).collect();
        let unc = uncertainty_summary(&lesion_preds, &lesion_labels)?;
        let report = binary_metrics(&scores, &lesion_labels)?.with_mean_uncertainty(unc.mean);
        (Some(report), Some(unc))
    };

    Ok(FoldOutcome {
        fold,
        history,
        lesion_test,
        stain_test,
        lesion_uncertainty,
        stain_uncertainty,
    })
}

/// Mean and population standard deviation of a value list.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrunkConfig, TrunkKind};
    use crate::synth::{generate, GenSpec};

    fn tiny_dataset(seed: u64) -> (Dataset, SplitPlan) {
        let spec = GenSpec {
            n_patches: 420,
            patch_size: 8,
            groups_per_stain: 6,
            confound_rho: 0.3,
            seed,
            ..GenSpec::default()
        };
        let patches = generate(&spec).unwrap();
        let plan = crate::synth::group_split(&patches, &SplitPlan::default(), seed).unwrap();
        (Dataset::new(patches).unwrap(), plan)
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            trunk: TrunkConfig {
                kind: TrunkKind::Conv,
                widths: vec![3],
                input_shape: (3, 8, 8),
                feature_dim: 8,
            },
            head_hidden: 6,
            dropout_rate: 0.2,
        }
    }

    fn tiny_train_config(max_epochs: usize) -> TrainConfig {
        TrainConfig { max_epochs, ..TrainConfig::default() }
    }

    fn scalar_param(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1]).unwrap().with_grad()
    }

    #[test]
    fn adam_zero_or_missing_grads_leave_params_unchanged() {
        let mut p = scalar_param(1.25);
        let mut state = AdamState::new(0.1, 0.9, 0.999, 1e-8, &[1]);
        adam_step(&mut state, &mut [&mut p], &[String::from("p")], 1).unwrap();
        assert_eq!(p.data()[0].to_bits(), 1.25f64.to_bits());
        p.accumulate_grad(&[0.0]);
        adam_step(&mut state, &mut [&mut p], &[String::from("p")], 1).unwrap();
        assert_eq!(p.data()[0].to_bits(), 1.25f64.to_bits());
        assert_eq!(state.step, 2);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut p = scalar_param(1.0);
        p.accumulate_grad(&[1.0]);
        let mut state = AdamState::new(0.1, 0.9, 0.999, 1e-8, &[1]);
        adam_step(&mut state, &mut [&mut p], &[String::from("p")], 1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8, "got {}", p.data()[0]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = scalar_param(0.0);
        let mut state = AdamState::new(0.1, 0.9, 0.999, 1e-8, &[1]);
        for _ in 0..200 {
            let x = p.data()[0];
            p.clear_grad();
            p.accumulate_grad(&[2.0 * (x - 3.0)]);
            adam_step(&mut state, &mut [&mut p], &[String::from("x")], 1).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.05, "got {}", p.data()[0]);
    }

    #[test]
    fn adam_reports_non_finite_grad_with_name() {
        let mut p = scalar_param(0.0);
        p.accumulate_grad(&[f64::NAN]);
        let mut state = AdamState::new(0.1, 0.9, 0.999, 1e-8, &[1]);
        let err = adam_step(&mut state, &mut [&mut p], &[String::from("trunk.0.weight")], 3)
            .unwrap_err();
        match err {
            TrainError::NonFiniteGrad { param, epoch } => {
                assert_eq!(param, "trunk.0.weight");
                assert_eq!(epoch, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scheduler_halves_after_patience_and_floors() {
        let config = TrainConfig { lr: 0.8, min_lr: 0.11, ..TrainConfig::default() };
        let mut s = PlateauScheduler::new(0.8, &config);
        // first observation set the baseline
        assert_eq!(s.observe(1.0), 0.8);
        assert_eq!(s.observe(1.0), 0.8);
        assert_eq!(s.observe(1.0), 0.8);
        assert_eq!(s.observe(1.0), 0.8);
        // fourth consecutive non-improvement exceeds patience 3
        assert_eq!(s.observe(1.0), 0.4);
        let mut last = 0.4;
        for _ in 0..20 {
            let lr = s.observe(1.0);
            assert!(lr <= last);
            assert!(lr >= config.min_lr);
            last = lr;
        }
        assert_eq!(last, 0.11);
        // an improvement resets the counter without touching the rate
        assert_eq!(s.observe(0.5), 0.11);
    }

    #[test]
    fn early_stop_patience_example() {
        let mut e = EarlyStop::new(&TrainConfig::default());
        let mut stopped_at = None;
        for (i, v) in [1.0, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1].iter().enumerate() {
            let epoch = i + 1;
            e.observe(epoch, *v);
            if e.should_stop(epoch) && stopped_at.is_none() {
                stopped_at = Some(epoch);
            }
        }
        assert_eq!(stopped_at, Some(9));
        assert_eq!(e.best_epoch, 1);
        assert!((e.best_val_loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn early_stop_needs_tolerated_improvement() {
        let mut e = EarlyStop::new(&TrainConfig::default());
        assert!(e.observe(1, 1.0));
        // a shrink below the tolerance is not an improvement
        assert!(!e.observe(2, 1.0 - 5e-5));
        assert!(e.observe(3, 1.0 - 2e-4));
    }

    #[test]
    fn train_is_deterministic_and_restores_best_snapshot() {
        let (data, plan) = tiny_dataset(5);
        let weights = LossWeights::default();
        let config = tiny_train_config(3);
        let make =
            || Model::dual(tiny_model_config(), 77).unwrap();
        let (model_a, hist_a) =
            train(make(), &data, &plan, 0, &weights, &config, 123).unwrap();
        let (model_b, hist_b) =
            train(make(), &data, &plan, 0, &weights, &config, 123).unwrap();
        assert_eq!(hist_a, hist_b);
        for (pa, pb) in model_a.params().iter().zip(model_b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        assert!(hist_a.epochs.len() <= 3);
        assert!(hist_a.best_epoch >= 1);
        assert!(hist_a.stain_label_reads > 0);

        // snapshot correctness: re-evaluating the returned model on the
        // validation fold reproduces the recorded best value
        let (_, val_idx) = fold_indices(&data, &plan, 0).unwrap();
        let stats = evaluate_split(&model_a, &data, &val_idx, &weights, false).unwrap();
        assert!(
            (stats.objective - hist_a.best_val_loss).abs() < 1e-9,
            "{} vs {}",
            stats.objective,
            hist_a.best_val_loss
        );

        let different_seed =
            train(make(), &data, &plan, 0, &weights, &config, 124).unwrap().1;
        assert_ne!(hist_a, different_seed);
    }

    #[test]
    fn training_moves_parameters_and_reduces_the_objective() {
        let (data, plan) = tiny_dataset(5);
        let weights = LossWeights::default();
        let config = tiny_train_config(8);
        let init = Model::dual(tiny_model_config(), 77).unwrap();
        let before: Vec<Vec<f64>> = init.params().iter().map(|p| p.data().to_vec()).collect();
        let (trained, hist) = train(init, &data, &plan, 0, &weights, &config, 123).unwrap();

        let moved = trained
            .params()
            .iter()
            .zip(&before)
            .any(|(p, b)| p.data() != b.as_slice());
        assert!(moved, "no parameter changed during training");

        let first = hist.epochs.first().unwrap().val_loss;
        assert!(
            hist.best_val_loss < first,
            "objective never improved: first {first}, best {}",
            hist.best_val_loss
        );

        // the per-epoch norm trace must show the stain head reacting to the
        // supervised stain term once mu2 is nonzero
        let sup = LossWeights {
            mu2: 1.0,
            ..LossWeights::default()
        };
        let init = Model::dual(tiny_model_config(), 77).unwrap();
        let norm0 = init.stain_head().output_weight_norm();
        let (_, hist_sup) = train(init, &data, &plan, 0, &sup, &config, 123).unwrap();
        assert!(hist_sup
            .epochs
            .iter()
            .any(|e| (e.stain_weight_norm - norm0).abs() > 1e-9));
    }

    #[test]
    fn entropy_mode_training_reads_no_stain_labels() {
        let (data, plan) = tiny_dataset(9);
        data.reset_stain_reads();
        let weights = LossWeights {
            mu1: 1.0,
            mu2: -0.5,
            stain_mode: StainMode::EntropyMax,
        };
        let config = tiny_train_config(2);
        let model = Model::dual(tiny_model_config(), 3).unwrap();
        let (_, hist) = train(model, &data, &plan, 1, &weights, &config, 7).unwrap();
        assert_eq!(hist.stain_label_reads, 0);
        assert_eq!(data.stain_reads(), 0);
        assert!(hist.epochs.iter().all(|e| e.val_stain_ce.is_none()));
        assert!(hist.epochs.iter().all(|e| e.val_stain_acc.is_none()));
        assert!(hist.epochs.iter().all(|e| e.val_stain_entropy.is_finite()));
    }

    #[test]
    fn supervised_training_counts_label_reads() {
        let (data, plan) = tiny_dataset(21);
        data.reset_stain_reads();
        let weights = LossWeights { mu2: 0.5, ..LossWeights::default() };
        let config = tiny_train_config(1);
        let model = Model::dual(tiny_model_config(), 3).unwrap();
        let (_, hist) = train(model, &data, &plan, 0, &weights, &config, 7).unwrap();
        let (train_idx, val_idx) = fold_indices(&data, &plan, 0).unwrap();
        let expected = (train_idx.len() + val_idx.len()) as u64;
        assert_eq!(hist.stain_label_reads, expected);
        assert_eq!(data.stain_reads(), expected);
    }

    #[test]
    fn lr_sequence_non_increasing_during_training() {
        let (data, plan) = tiny_dataset(33);
        let config = TrainConfig {
            max_epochs: 12,
            scheduler_patience: 1,
            improvement_tol: 10.0,
            ..TrainConfig::default()
        };
        let model = Model::dual(tiny_model_config(), 5).unwrap();
        let (_, hist) =
            train(model, &data, &plan, 0, &LossWeights::default(), &config, 3).unwrap();
        let lrs: Vec<f64> = hist.epochs.iter().map(|e| e.lr).collect();
        for pair in lrs.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        assert!(lrs.iter().all(|&lr| lr >= config.min_lr));
        // the huge improvement tolerance forces the plateau path, so the
        // rate must actually decay
        assert!(lrs.last().unwrap() < &config.lr);
    }

    #[test]
    fn run_cv_produces_disjoint_folds_and_aggregates() {
        let (data, plan) = tiny_dataset(55);
        let config = tiny_train_config(1);
        let factory =
            |fold: usize| Model::dual(tiny_model_config(), 100 + fold as u64);
        let outcomes =
            run_cv(&factory, &data, &plan, &LossWeights::default(), &config, 9).unwrap();
        assert_eq!(outcomes.len(), plan.n_folds);
        for o in &outcomes {
            let (train_idx, val_idx) = fold_indices(&data, &plan, o.fold).unwrap();
            let train_groups: alloc::collections::BTreeSet<u32> =
                train_idx.iter().map(|&i| data.group(i)).collect();
            let val_groups: alloc::collections::BTreeSet<u32> =
                val_idx.iter().map(|&i| data.group(i)).collect();
            assert!(train_groups.is_disjoint(&val_groups));
            let report = o.lesion_test.as_ref().unwrap();
            assert_eq!(report.n, test_indices(&data, &plan).len());
            assert!(o.stain_test.accuracy >= 0.0 && o.stain_test.accuracy <= 1.0);
        }
        let accs: Vec<f64> = outcomes
            .iter()
            .map(|o| o.lesion_test.as_ref().unwrap().accuracy)
            .collect();
        let (mean, _) = mean_std(&accs);
        let direct = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - direct).abs() < 1e-12);
        let (_, zero_std) = mean_std(&[0.7, 0.7, 0.7, 0.7, 0.7]);
        assert!(zero_std.abs() < 1e-15);
    }

    #[test]
    fn stain_only_model_trains_on_stain_loss() {
        let (data, plan) = tiny_dataset(71);
        let config = tiny_train_config(2);
        let model = Model::stain_only(tiny_model_config(), 11).unwrap();
        let (_, hist) = train(
            model,
            &data,
            &plan,
            0,
            &LossWeights::default(),
            &config,
            2,
        )
        .unwrap();
        assert!(hist.epochs.iter().all(|e| e.val_lesion_ce.is_none()));
        assert!(hist.epochs.iter().all(|e| e.val_stain_ce.is_some()));
        assert!(hist.stain_label_reads > 0);

        let entropy_weights = LossWeights {
            mu2: -0.5,
            stain_mode: StainMode::EntropyMax,
            ..LossWeights::default()
        };
        let model = Model::stain_only(tiny_model_config(), 11).unwrap();
        assert!(matches!(
            train(model, &data, &plan, 0, &entropy_weights, &config, 2),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn bad_fold_and_empty_partition_errors() {
        let (data, plan) = tiny_dataset(81);
        let config = tiny_train_config(1);
        let model = Model::dual(tiny_model_config(), 1).unwrap();
        assert!(matches!(
            train(model, &data, &plan, 9, &LossWeights::default(), &config, 1),
            Err(TrainError::NoSuchFold { fold: 9, .. })
        ));
    }
}
